//! Split-step pseudospectral integration of the coupled cubic NLS system on
//! the 2-torus and checks of the first-order quasi-periodic ansatz.
//!
//! Modes use the basis `φ_n = e^{i⟨n,x⟩}/(2π)`, so `u_h = Σ q_{h,n} φ_n` and
//! `∫|u_h|² = Σ|q_{h,n}|²`. The lattice equation reads
//! `q̇_n = i|n|² q_n + FFT[i(|u_h|² + ∂_{s_h}G_h(s)) u_h]_n` with
//! `s = (|u_1|², …, |u_d|²)`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{ResonanceKind, Site, SiteAtlas, SiteClass, TangentialSet};
use crate::polyvf::{seq_norm, ModeState};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("blow-up at step {step}: component {h} sup-norm {sup:.3e} exceeds {bound:.3e}")]
    BlowUp { step: usize, h: usize, sup: f64, bound: f64 },
    #[error("degenerate phase fit: {0}")]
    DegenerateFit(String),
}

/// One term `coeff · Π_l s_l^{powers[l]}` of a coupling polynomial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTerm {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

/// The coupling `G_h(s_1, …, s_d)` for each component; every term has total
/// degree ≥ 3 in `s`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingPoly {
    pub per_component: Vec<Vec<CouplingTerm>>,
}

impl CouplingPoly {
    pub fn zero(d: usize) -> Self {
        CouplingPoly {
            per_component: vec![Vec::new(); d],
        }
    }

    /// `G_1 = c s_1 s_2²`, `G_2 = c s_1² s_2` for `d = 2`; zero otherwise.
    pub fn default_for(d: usize, c: f64) -> Self {
        if d != 2 {
            return Self::zero(d);
        }
        CouplingPoly {
            per_component: vec![
                vec![CouplingTerm { coeff: c, powers: vec![1, 2] }],
                vec![CouplingTerm { coeff: c, powers: vec![2, 1] }],
            ],
        }
    }

    pub fn validate(&self, d: usize) -> Result<(), SimError> {
        if self.per_component.len() != d {
            return Err(SimError::Config(format!(
                "coupling has {} components, expected {d}",
                self.per_component.len()
            )));
        }
        for (h, terms) in self.per_component.iter().enumerate() {
            for t in terms {
                if t.powers.len() != d {
                    return Err(SimError::Config(format!("coupling term of G_{} needs {d} powers", h + 1)));
                }
                let deg: u32 = t.powers.iter().sum();
                if deg < 3 {
                    return Err(SimError::Config(format!(
                        "coupling term of G_{} has degree {deg} in s; at least 3 is required",
                        h + 1
                    )));
                }
                if !t.coeff.is_finite() {
                    return Err(SimError::Config("coupling coefficient must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.per_component.iter().all(|t| t.iter().all(|x| x.coeff == 0.0))
    }

    /// `∂G_h/∂s_h` at `s`.
    pub fn d_ds(&self, h: usize, s: &[f64]) -> f64 {
        self.per_component[h]
            .iter()
            .map(|t| {
                let p = t.powers[h];
                if p == 0 {
                    return 0.0;
                }
                let mut v = t.coeff * p as f64 * s[h].powi(p as i32 - 1);
                for (l, &pl) in t.powers.iter().enumerate() {
                    if l != h {
                        v *= s[l].powi(pl as i32);
                    }
                }
                v
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative drift of tangential amplitudes.
    pub amp_drift: f64,
    /// Normal-sector bound is `normal_coeff · max ξ^{3/2}`.
    pub normal_coeff: f64,
    /// Relative per-component mass drift.
    pub mass_drift: f64,
    /// Absolute error of fitted against first-order frequencies.
    pub freq: f64,
    /// Sup-norm of `u_h` beyond which integration aborts.
    pub blowup: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            amp_drift: 0.01,
            normal_coeff: 10.0,
            mass_drift: 1e-10,
            freq: 1e-6,
            blowup: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub d: usize,
    /// Grid points per dimension.
    pub n_grid: usize,
    pub dt: f64,
    pub t_final: f64,
    pub tangential: TangentialSet,
    /// `ξ_{h,a}`, flat and `h`-major.
    pub xi: Vec<f64>,
    pub coupling: CouplingPoly,
    /// Steps between recorded samples.
    pub stride: usize,
    pub seed: u64,
    pub tolerances: Tolerances,
    /// Extra modes to record, in every component.
    pub extra_modes: Vec<Site>,
}

impl SimConfig {
    pub fn new(d: usize, tangential: TangentialSet, xi: Vec<f64>) -> Self {
        SimConfig {
            d,
            n_grid: 64,
            dt: 1e-3,
            t_final: 10.0,
            tangential,
            xi,
            coupling: CouplingPoly::default_for(d, 1.0),
            stride: 10,
            seed: 0,
            tolerances: Tolerances::default(),
            extra_modes: Vec::new(),
        }
    }

    pub fn b(&self) -> usize {
        self.tangential.len()
    }

    pub fn xi_at(&self, h: usize, a: usize) -> f64 {
        self.xi[h * self.b() + a]
    }

    /// Number of steps; `t_final/dt` must be an integer.
    pub fn steps(&self) -> Result<usize, SimError> {
        let r = self.t_final / self.dt;
        let n = r.round();
        if (r - n).abs() > 1e-6 * n.max(1.0) {
            return Err(SimError::Config(format!("t_final/dt = {r} is not an integer")));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.n_grid;
        if n < 8 || !n.is_power_of_two() {
            return Err(SimError::Config(format!("grid size {n} must be a power of two ≥ 8")));
        }
        if self.d == 0 {
            return Err(SimError::Config("d must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(SimError::Config(format!("dt = {} outside (0, 0.1]", self.dt)));
        }
        if !(self.t_final >= 0.0) {
            return Err(SimError::Config("t_final must be non-negative".into()));
        }
        if self.stride == 0 {
            return Err(SimError::Config("stride must be positive".into()));
        }
        if self.xi.len() != self.d * self.b() {
            return Err(SimError::Config(format!(
                "xi has {} entries, expected d·b = {}",
                self.xi.len(),
                self.d * self.b()
            )));
        }
        if self.xi.iter().any(|x| !(0.0..=1e-2).contains(x)) {
            return Err(SimError::Config("every xi must lie in [0, 1e-2]".into()));
        }
        let half = (n / 2) as i64;
        for s in self.tangential.sites().iter().chain(&self.extra_modes) {
            if s.n1.abs() >= half || s.n2.abs() >= half {
                return Err(SimError::Config(format!("mode {s} is outside the {n}×{n} grid")));
            }
        }
        self.coupling.validate(self.d)?;
        let steps = self.steps()?;
        if steps % self.stride != 0 {
            return Err(SimError::Config(format!(
                "stride {} does not divide the step count {steps}",
                self.stride
            )));
        }
        Ok(())
    }
}

/// Fourier coefficients `q_{h,n}` for `|n_i| < N/2`, stored as `N×N` arrays
/// indexed by `n mod N`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub n: usize,
    pub q: Vec<Vec<Complex64>>,
}

impl FieldState {
    pub fn zeros(d: usize, n: usize) -> Self {
        FieldState {
            n,
            q: vec![vec![Complex64::default(); n * n]; d],
        }
    }

    pub fn d(&self) -> usize {
        self.q.len()
    }

    pub fn index(&self, s: Site) -> usize {
        let n = self.n as i64;
        (s.n1.rem_euclid(n) * n + s.n2.rem_euclid(n)) as usize
    }

    /// Site of a flat index, in `[−N/2, N/2)`.
    pub fn site(&self, idx: usize) -> Site {
        let n = self.n as i64;
        let wrap = |v: i64| if v >= n / 2 { v - n } else { v };
        Site::new(wrap(idx as i64 / n), wrap(idx as i64 % n))
    }

    pub fn get(&self, h: usize, s: Site) -> Complex64 {
        self.q[h][self.index(s)]
    }

    pub fn set(&mut self, h: usize, s: Site, v: Complex64) {
        let i = self.index(s);
        self.q[h][i] = v;
    }

    pub fn mass(&self, h: usize) -> f64 {
        self.q[h].iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn from_modes(d: usize, n: usize, modes: &ModeState) -> Self {
        let mut st = FieldState::zeros(d, n);
        for (&(h, s), v) in &modes.coeffs {
            st.set(h, s, *v);
        }
        st
    }

    pub fn to_modes(&self) -> ModeState {
        let mut out = ModeState::new(self.d());
        for h in 0..self.d() {
            for (idx, v) in self.q[h].iter().enumerate() {
                if *v != Complex64::default() {
                    out.set(h, self.site(idx), *v);
                }
            }
        }
        out
    }

    /// `S`: `q ↦ conj q`.
    pub fn conjugated(&self) -> Self {
        FieldState {
            n: self.n,
            q: self.q.iter().map(|c| c.iter().map(|v| v.conj()).collect()).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &FieldState) -> f64 {
        self.q
            .iter()
            .zip(&other.q)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max)
    }
}

/// Unnormalised 2-D transforms on an `N×N` row-major grid.
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Fft2 {
            n,
            fwd,
            inv,
            scratch: vec![Complex64::default(); len],
        }
    }

    fn transpose(&self, data: &mut [Complex64]) {
        let n = self.n;
        for r in 0..n {
            for c in r + 1..n {
                data.swap(r * n + c, c * n + r);
            }
        }
    }

    fn run(&mut self, data: &mut [Complex64], forward: bool) {
        let plan = if forward { self.fwd.clone() } else { self.inv.clone() };
        plan.process_with_scratch(data, &mut self.scratch);
        self.transpose(data);
        plan.process_with_scratch(data, &mut self.scratch);
        self.transpose(data);
    }

    /// `Σ_j x_j e^{−i⟨n, x_j⟩}`.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.run(data, true);
    }

    /// `Σ_n q_n e^{+i⟨n, x_j⟩}`.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Physical field `u(x_j)` from coefficients.
    pub fn to_physical(&mut self, q: &[Complex64], out: &mut Vec<Complex64>) {
        out.clear();
        out.extend_from_slice(q);
        self.inverse(out);
        let k = 1.0 / (2.0 * PI);
        out.iter_mut().for_each(|v| *v *= k);
    }

    /// Coefficients from a physical field.
    pub fn to_spectral(&mut self, u: &[Complex64], out: &mut Vec<Complex64>) {
        out.clear();
        out.extend_from_slice(u);
        self.forward(out);
        let k = 2.0 * PI / (self.n * self.n) as f64;
        out.iter_mut().for_each(|v| *v *= k);
    }
}

/// Strang splitting `L(dt/2) N(dt) L(dt/2)` with 2/3-rule dealiasing of the
/// nonlinear image.
pub struct Stepper {
    n: usize,
    dt: f64,
    half_phase: Vec<Complex64>,
    keep: Vec<bool>,
    coupling: CouplingPoly,
    blowup: f64,
    fft: Fft2,
    phys: Vec<Vec<Complex64>>,
    buf: Vec<Complex64>,
    steps_taken: usize,
}

impl Stepper {
    pub fn new(d: usize, n: usize, dt: f64, coupling: CouplingPoly, blowup: f64) -> Self {
        let proto = FieldState::zeros(1, n);
        let cutoff = n as f64 / 3.0;
        let mut half_phase = Vec::with_capacity(n * n);
        let mut keep = Vec::with_capacity(n * n);
        for idx in 0..n * n {
            let s = proto.site(idx);
            half_phase.push(Complex64::from_polar(1.0, s.norm_sq() as f64 * dt / 2.0));
            keep.push((s.n1.abs() as f64) <= cutoff && (s.n2.abs() as f64) <= cutoff);
        }
        Stepper {
            n,
            dt,
            half_phase,
            keep,
            coupling,
            blowup,
            fft: Fft2::new(n),
            phys: vec![Vec::with_capacity(n * n); d],
            buf: Vec::with_capacity(n * n),
            steps_taken: 0,
        }
    }

    pub fn from_config(cfg: &SimConfig) -> Self {
        Stepper::new(cfg.d, cfg.n_grid, cfg.dt, cfg.coupling.clone(), cfg.tolerances.blowup)
    }

    fn linear_half(&self, state: &mut FieldState) {
        for q in &mut state.q {
            q.iter_mut().zip(&self.half_phase).for_each(|(v, p)| *v *= p);
        }
    }

    fn nonlinear(&mut self, state: &mut FieldState) -> Result<(), SimError> {
        let d = state.d();
        for h in 0..d {
            let mut out = std::mem::take(&mut self.phys[h]);
            self.fft.to_physical(&state.q[h], &mut out);
            self.phys[h] = out;
        }
        for h in 0..d {
            let sup = self.phys[h].iter().map(|v| v.norm()).fold(0.0, f64::max);
            if !(sup <= self.blowup) {
                return Err(SimError::BlowUp {
                    step: self.steps_taken,
                    h,
                    sup,
                    bound: self.blowup,
                });
            }
        }
        let has_g = !self.coupling.is_zero();
        let mut s = vec![0.0; d];
        for j in 0..self.n * self.n {
            for h in 0..d {
                s[h] = self.phys[h][j].norm_sqr();
            }
            for h in 0..d {
                let g = if has_g { self.coupling.d_ds(h, &s) } else { 0.0 };
                self.phys[h][j] *= Complex64::from_polar(1.0, self.dt * (s[h] + g));
            }
        }
        for h in 0..d {
            let mut out = std::mem::take(&mut self.buf);
            self.fft.to_spectral(&self.phys[h], &mut out);
            for (idx, v) in out.iter_mut().enumerate() {
                if !self.keep[idx] {
                    *v = Complex64::default();
                }
            }
            state.q[h].copy_from_slice(&out);
            self.buf = out;
        }
        Ok(())
    }

    pub fn step(&mut self, state: &mut FieldState) -> Result<(), SimError> {
        self.linear_half(state);
        self.nonlinear(state)?;
        self.linear_half(state);
        self.steps_taken += 1;
        Ok(())
    }
}

/// One Strang step (builds the transform plans; use [`Stepper`] in loops).
pub fn step_strang(state: &FieldState, dt: f64, cfg: &SimConfig) -> Result<FieldState, SimError> {
    let mut st = state.clone();
    Stepper::new(cfg.d, cfg.n_grid, dt, cfg.coupling.clone(), cfg.tolerances.blowup).step(&mut st)?;
    Ok(st)
}

/// Right-hand side of the lattice equation, evaluated spectrally without
/// dealiasing.
pub fn rhs(state: &FieldState, coupling: &CouplingPoly) -> FieldState {
    let n = state.n;
    let d = state.d();
    let mut fft = Fft2::new(n);
    let mut phys = vec![Vec::new(); d];
    for h in 0..d {
        fft.to_physical(&state.q[h], &mut phys[h]);
    }
    let mut out = FieldState::zeros(d, n);
    let mut s = vec![0.0; d];
    let mut nl = vec![vec![Complex64::default(); n * n]; d];
    for j in 0..n * n {
        for h in 0..d {
            s[h] = phys[h][j].norm_sqr();
        }
        for h in 0..d {
            let g = coupling.d_ds(h, &s);
            nl[h][j] = Complex64::new(0.0, s[h] + g) * phys[h][j];
        }
    }
    let mut buf = Vec::new();
    for h in 0..d {
        fft.to_spectral(&nl[h], &mut buf);
        for idx in 0..n * n {
            let lam = state.site(idx).norm_sq() as f64;
            out.q[h][idx] = Complex64::new(0.0, lam) * state.q[h][idx] + buf[idx];
        }
    }
    out
}

/// `q_{h,i_a} = sqrt(ξ_{h,a})`, everything else zero.
pub fn build_ansatz(cfg: &SimConfig) -> Result<FieldState, SimError> {
    let half = (cfg.n_grid / 2) as i64;
    let mut st = FieldState::zeros(cfg.d, cfg.n_grid);
    for h in 0..cfg.d {
        for (a, &s) in cfg.tangential.sites().iter().enumerate() {
            if s.n1.abs() >= half || s.n2.abs() >= half {
                return Err(SimError::Config(format!("tangential site {s} is outside the grid")));
            }
            st.set(h, s, Complex64::new(cfg.xi_at(h, a).sqrt(), 0.0));
        }
    }
    Ok(st)
}

/// First-order frequencies `ω_{h,a} = |i_a|² + (ξ_{h,a} + 2Σ_{c≠a} ξ_{h,c})/(4π²)`.
pub fn predicted_frequencies(cfg: &SimConfig) -> Vec<f64> {
    let b = cfg.b();
    let mut out = Vec::with_capacity(cfg.d * b);
    for h in 0..cfg.d {
        let total: f64 = (0..b).map(|c| cfg.xi_at(h, c)).sum();
        for (a, s) in cfg.tangential.sites().iter().enumerate() {
            let own = cfg.xi_at(h, a);
            out.push(s.norm_sq() as f64 + (own + 2.0 * (total - own)) / (4.0 * PI * PI));
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackedMode {
    pub h: usize,
    pub n: Site,
    pub kind: String,
    pub values: Vec<Complex64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeTrace {
    pub times: Vec<f64>,
    pub modes: Vec<TrackedMode>,
    /// `mass[h][sample]`.
    pub mass: Vec<Vec<f64>>,
    /// `max_{n∉I} |q_{h,n}|` per component and sample.
    pub normal_sup: Vec<Vec<f64>>,
}

/// Tangential modes, second-type sites, the four smallest first-type sites
/// and user extras that fit on the grid.
fn tracked_sites(cfg: &SimConfig) -> Vec<(Site, String)> {
    let mut out: Vec<(Site, String)> = cfg.tangential.sites().iter().map(|s| (*s, "tangential".to_string())).collect();
    let radius = (cfg.n_grid / 3) as i64;
    let half = (cfg.n_grid / 2) as i64;
    let fits = |s: &Site| s.n1.abs() < half && s.n2.abs() < half;
    if let Ok(atlas) = SiteAtlas::build(&cfg.tangential, radius) {
        let mut first: Vec<Site> = Vec::new();
        for (s, c) in atlas.iter() {
            match c {
                SiteClass::SecondType(_) => out.push((*s, "second".into())),
                SiteClass::FirstType(p) if p.kind == ResonanceKind::First => first.push(*s),
                _ => {}
            }
        }
        first.sort_by_key(|s| (s.norm_sq(), *s));
        out.extend(first.into_iter().take(4).map(|s| (s, "first".into())));
    }
    for s in &cfg.extra_modes {
        if !out.iter().any(|(t, _)| t == s) {
            out.push((*s, "extra".into()));
        }
    }
    out.retain(|(s, _)| fits(s));
    out
}

fn normal_sup(state: &FieldState, h: usize, tangential: &[usize]) -> f64 {
    state.q[h]
        .iter()
        .enumerate()
        .filter(|(idx, _)| !tangential.contains(idx))
        .map(|(_, v)| v.norm())
        .fold(0.0, f64::max)
}

/// Integrates from `initial` and records the trace.
pub fn run_from(cfg: &SimConfig, initial: FieldState) -> Result<ModeTrace, SimError> {
    cfg.validate()?;
    let steps = cfg.steps()?;
    let sites = tracked_sites(cfg);
    let mut state = initial;
    let tang_idx: Vec<usize> = cfg.tangential.sites().iter().map(|s| state.index(*s)).collect();
    let mut stepper = Stepper::from_config(cfg);
    let samples = steps / cfg.stride + 1;
    let mut trace = ModeTrace {
        times: Vec::with_capacity(samples),
        modes: (0..cfg.d)
            .flat_map(|h| {
                sites.iter().map(move |(s, k)| TrackedMode {
                    h,
                    n: *s,
                    kind: k.clone(),
                    values: Vec::with_capacity(samples),
                })
            })
            .collect(),
        mass: vec![Vec::with_capacity(samples); cfg.d],
        normal_sup: vec![Vec::with_capacity(samples); cfg.d],
    };
    let record = |state: &FieldState, step: usize, trace: &mut ModeTrace| {
        trace.times.push(step as f64 * cfg.dt);
        for m in &mut trace.modes {
            m.values.push(state.get(m.h, m.n));
        }
        for h in 0..cfg.d {
            trace.mass[h].push(state.mass(h));
            trace.normal_sup[h].push(normal_sup(state, h, &tang_idx));
        }
    };
    record(&state, 0, &mut trace);
    for step in 1..=steps {
        stepper.step(&mut state)?;
        if step % cfg.stride == 0 {
            record(&state, step, &mut trace);
        }
    }
    Ok(trace)
}

/// Integrates the ansatz initial data.
pub fn run(cfg: &SimConfig) -> Result<ModeTrace, SimError> {
    cfg.validate()?;
    run_from(cfg, build_ansatz(cfg)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct FrequencyFit {
    pub h: usize,
    pub n: Site,
    pub omega: f64,
    /// RMS deviation of the unwrapped phase from the fitted line.
    pub residual: f64,
}

/// Least-squares slope of the unwrapped phase of `values · e^{−i·base·t}`,
/// plus `base`. Demodulating by a known carrier keeps per-sample increments small.
pub fn fit_phase(times: &[f64], values: &[Complex64], base: f64) -> Result<(f64, f64), SimError> {
    if times.len() < 2 || times.len() != values.len() {
        return Err(SimError::DegenerateFit("need at least two samples".into()));
    }
    let amax = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if amax == 0.0 || values.iter().any(|v| v.norm() <= 1e-3 * amax) {
        return Err(SimError::DegenerateFit("amplitude vanishes along the trace".into()));
    }
    let mut phase = Vec::with_capacity(values.len());
    let mut prev = 0.0;
    let mut offset = 0.0;
    for (k, (t, v)) in times.iter().zip(values).enumerate() {
        let raw = (v * Complex64::from_polar(1.0, -base * t)).arg();
        if k > 0 {
            let mut jump = raw + offset - prev;
            while jump > PI {
                offset -= 2.0 * PI;
                jump -= 2.0 * PI;
            }
            while jump < -PI {
                offset += 2.0 * PI;
                jump += 2.0 * PI;
            }
            if jump.abs() > PI / 2.0 {
                return Err(SimError::DegenerateFit(format!("phase increment {jump:.3} rad per sample is ambiguous")));
            }
        }
        prev = raw + offset;
        phase.push(prev);
    }
    let n = times.len() as f64;
    let mt = times.iter().sum::<f64>() / n;
    let mp = phase.iter().sum::<f64>() / n;
    let stt: f64 = times.iter().map(|t| (t - mt).powi(2)).sum();
    let stp: f64 = times.iter().zip(&phase).map(|(t, p)| (t - mt) * (p - mp)).sum();
    let slope = stp / stt;
    let rms = (times
        .iter()
        .zip(&phase)
        .map(|(t, p)| (p - mp - slope * (t - mt)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok((slope + base, rms))
}

/// Frequencies of every tracked tangential mode.
pub fn fit_frequencies(trace: &ModeTrace) -> Result<Vec<FrequencyFit>, SimError> {
    trace
        .modes
        .iter()
        .filter(|m| m.kind == "tangential")
        .map(|m| {
            let (omega, residual) = fit_phase(&trace.times, &m.values, m.n.norm_sq() as f64)?;
            Ok(FrequencyFit {
                h: m.h,
                n: m.n,
                omega,
                residual,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeVerdict {
    pub h: usize,
    pub n: Site,
    pub xi: f64,
    pub amplitude_drift: f64,
    pub fitted: Option<f64>,
    pub predicted: f64,
    pub freq_error: Option<f64>,
    pub fit_residual: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct QPVerdict {
    pub modes: Vec<ModeVerdict>,
    pub normal_sup: f64,
    pub normal_bound: f64,
    pub mass_drift: f64,
    pub max_amplitude_drift: f64,
    pub max_freq_error: f64,
    pub amplitude_ok: bool,
    pub normal_ok: bool,
    pub frequency_ok: bool,
    pub mass_ok: bool,
    pub pass: bool,
    /// Linear phases follow `e^{+i|n|²t}`; fitted frequencies are reported in
    /// that convention.
    pub sign_convention: &'static str,
}

/// Amplitude persistence, normal-sector smallness, frequency agreement and
/// mass conservation along an ansatz run.
pub fn verify_quasiperiodic(trace: &ModeTrace, cfg: &SimConfig) -> QPVerdict {
    let tol = &cfg.tolerances;
    let predicted = predicted_frequencies(cfg);
    let b = cfg.b();
    let mut modes = Vec::new();
    for m in trace.modes.iter().filter(|m| m.kind == "tangential") {
        let a = cfg.tangential.index_of(m.n).expect("tangential mode");
        let xi = cfg.xi_at(m.h, a);
        let a0 = m.values[0].norm();
        let drift = if a0 == 0.0 {
            0.0
        } else {
            m.values.iter().map(|v| (v.norm() - a0).abs() / a0).fold(0.0, f64::max)
        };
        let fit = if xi > 0.0 {
            fit_phase(&trace.times, &m.values, m.n.norm_sq() as f64).ok()
        } else {
            None
        };
        let pred = predicted[m.h * b + a];
        modes.push(ModeVerdict {
            h: m.h,
            n: m.n,
            xi,
            amplitude_drift: drift,
            fitted: fit.map(|f| f.0),
            predicted: pred,
            freq_error: fit.map(|f| (f.0 - pred).abs()),
            fit_residual: fit.map(|f| f.1),
        });
    }
    let xmax = cfg.xi.iter().copied().fold(0.0, f64::max);
    let normal_sup = trace.normal_sup.iter().flatten().copied().fold(0.0, f64::max);
    let normal_bound = tol.normal_coeff * xmax.powf(1.5);
    let mass_drift = trace
        .mass
        .iter()
        .map(|series| {
            let m0 = series[0];
            if m0 == 0.0 {
                0.0
            } else {
                series.iter().map(|m| (m - m0).abs() / m0).fold(0.0, f64::max)
            }
        })
        .fold(0.0, f64::max);
    let max_amplitude_drift = modes.iter().map(|m| m.amplitude_drift).fold(0.0, f64::max);
    let max_freq_error = modes.iter().filter_map(|m| m.freq_error).fold(0.0, f64::max);
    let fits_ok = modes.iter().all(|m| m.xi == 0.0 || m.fitted.is_some());
    let amplitude_ok = max_amplitude_drift <= tol.amp_drift;
    let normal_ok = normal_sup <= normal_bound;
    let frequency_ok = fits_ok && max_freq_error <= tol.freq;
    let mass_ok = mass_drift <= tol.mass_drift;
    QPVerdict {
        modes,
        normal_sup,
        normal_bound,
        mass_drift,
        max_amplitude_drift,
        max_freq_error,
        amplitude_ok,
        normal_ok,
        frequency_ok,
        mass_ok,
        pass: amplitude_ok && normal_ok && frequency_ok && mass_ok,
        sign_convention: "linear phase e^{+i|n|^2 t}",
    }
}

/// The first-order torus `q_{h,i_a}(t) = sqrt(ξ_{h,a}) e^{iω_{h,a} t}`.
pub fn ansatz_at(cfg: &SimConfig, t: f64) -> FieldState {
    let omega = predicted_frequencies(cfg);
    let b = cfg.b();
    let mut st = FieldState::zeros(cfg.d, cfg.n_grid);
    for h in 0..cfg.d {
        for (a, &s) in cfg.tangential.sites().iter().enumerate() {
            st.set(h, s, Complex64::from_polar(cfg.xi_at(h, a).sqrt(), omega[h * b + a] * t));
        }
    }
    st
}

/// `sup_t ‖q̇_ansatz − RHS(q_ansatz)‖_{ρ=0}` over `samples` equally spaced
/// times in `[0, t_final]`.
pub fn residual_norm(cfg: &SimConfig, samples: usize) -> f64 {
    let omega = predicted_frequencies(cfg);
    let b = cfg.b();
    let samples = samples.max(1);
    let mut worst = 0.0f64;
    for k in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            cfg.t_final * k as f64 / (samples - 1) as f64
        };
        let q = ansatz_at(cfg, t);
        let mut defect = rhs(&q, &cfg.coupling);
        for h in 0..cfg.d {
            for (a, &s) in cfg.tangential.sites().iter().enumerate() {
                let idx = q.index(s);
                let qdot = Complex64::new(0.0, omega[h * b + a]) * q.q[h][idx];
                defect.q[h][idx] -= qdot;
            }
        }
        worst = worst.max(seq_norm(&defect.to_modes(), 0.0));
    }
    worst
}
