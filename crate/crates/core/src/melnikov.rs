//! Non-degeneracy, gap and Melnikov non-resonance checks on the normal-form
//! frequencies, and Monte-Carlo estimates of the excluded parameter measure.
//!
//! Every divisor splits into an integer multiple `r` of `ε⁻⁴` and an analytic
//! remainder of size `O(K_max)`. When `r ≠ 0` scale separation settles the
//! inequality; only the `r = 0` cases are evaluated. Blocks are grouped into
//! classes sharing the same analytic matrix, so each `(k, class)` is checked
//! once regardless of how many lattice sites realise it.
//!
//! Divisors are only formed for index combinations that conserve lattice
//! momentum, `Σ k_{h,a} i_a ± p(n) ± p(n') = 0`, where `p` is the block
//! momentum. Other combinations never occur in a momentum-preserving
//! perturbation, and some of them vanish identically in `ξ`.
//!
//! `|k|` is the ℓ¹ norm over all `d·b` entries; `k` runs over `|k| ≤ K_max`
//! and sites over `|n| ≤ R`.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2};
use num_traits::ToPrimitive;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::birkhoff::{bareiss_det, verify_nondegeneracy, AffineFrequency, FrequencyData, MelnikovBlock};
use crate::lattice::Site;

#[derive(Debug, Error, PartialEq)]
pub enum MelnikovError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Parameter domain: component `h` (zero-based) ranges over `[h + 1/2, h + 1]^b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParameterBox {
    pub d: usize,
    pub b: usize,
}

impl ParameterBox {
    pub fn new(d: usize, b: usize) -> Self {
        ParameterBox { d, b }
    }

    pub fn bounds(&self, h: usize) -> (f64, f64) {
        (h as f64 + 0.5, h as f64 + 1.0)
    }

    pub fn contains(&self, xi: &[f64]) -> bool {
        xi.len() == self.d * self.b
            && xi.iter().enumerate().all(|(k, &v)| {
                let (lo, hi) = self.bounds(k / self.b);
                (lo..=hi).contains(&v)
            })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.d * self.b)
            .map(|k| {
                let (lo, hi) = self.bounds(k / self.b);
                rng.gen_range(lo..=hi)
            })
            .collect()
    }

    /// Upper corner, where every (positive-coefficient) frequency is largest.
    pub fn upper_corner(&self) -> Vec<f64> {
        (0..self.d * self.b).map(|k| self.bounds(k / self.b).1).collect()
    }

    /// `min_{h≠h'} |ξ_h − ξ_{h'}|₁` guaranteed on the box.
    pub fn separation(&self) -> f64 {
        if self.d < 2 {
            return f64::INFINITY;
        }
        self.b as f64 / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MelnikovConfig {
    pub eps: f64,
    pub tau: f64,
    pub k_max: i32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Condition {
    Mel1,
    Mel2,
    Mel13,
    Mel14,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Mel1, Condition::Mel2, Condition::Mel13, Condition::Mel14];

    fn idx(self) -> usize {
        self as usize
    }
}

/// Blocks sharing one analytic matrix.
#[derive(Clone, Debug)]
struct BlockClass {
    template: MelnikovBlock,
    /// `(momentum, quartic)` → a site realising it.
    sites: HashMap<(Site, i64), Site>,
}

#[derive(Clone, Debug)]
struct Mel2List {
    class: usize,
    sign: i8,
    ks: Vec<u32>,
}

#[derive(Clone, Debug)]
struct Mel13List {
    first: usize,
    second: usize,
    sign: i8,
    ks: Vec<u32>,
    /// `(p + σp', q + σq')` → a realising pair of sites.
    sums: HashMap<(Site, i64), (Site, Site)>,
}

/// One evaluated divisor.
#[derive(Clone, Copy, Debug)]
struct Hit {
    cond: Condition,
    k: u32,
    value: f64,
    weight: f64,
    ctx: HitCtx,
}

#[derive(Clone, Copy, Debug)]
enum HitCtx {
    None,
    Mel2 { list: usize },
    Mel13 { list: usize },
    Mel14 { h: usize, h2: usize },
}

/// Precomputed `k`-lists and block classes for fixed `(I, d, R, K_max, τ, ε)`.
#[derive(Clone, Debug)]
pub struct MelnikovEngine {
    d: usize,
    b: usize,
    db: usize,
    cfg: MelnikovConfig,
    radius: i64,
    ks: Vec<i32>,
    s: Vec<i64>,
    momentum: Vec<Site>,
    weight: Vec<f64>,
    omega: Vec<AffineFrequency>,
    normal0: Vec<AffineFrequency>,
    classes: Vec<BlockClass>,
    mel1: Vec<u32>,
    mel2: Vec<Mel2List>,
    mel13: Vec<Mel13List>,
    zero_k: u32,
}

fn class_key(b: &MelnikovBlock) -> (usize, usize, i8, usize, usize) {
    match b.coupling {
        Some(c) if b.dim == 2 => (b.h, 2, b.lower_sign, c.a, c.c),
        _ => (b.h, 1, 1, 0, 0),
    }
}

/// Enumerates `k ∈ Z^dim` with `|k|₁ ≤ k_max` in a fixed order.
pub fn k_ball(dim: usize, k_max: i32) -> Vec<Vec<i32>> {
    fn rec(dim: usize, budget: i32, cur: &mut Vec<i32>, out: &mut Vec<Vec<i32>>) {
        if cur.len() == dim {
            out.push(cur.clone());
            return;
        }
        for v in -budget..=budget {
            cur.push(v);
            rec(dim, budget - v.abs(), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, k_max, &mut Vec::with_capacity(dim), &mut out);
    out
}

fn eig2(m: &Matrix2<f64>) -> [Complex64; 2] {
    let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = Complex64::new(half_tr * half_tr - det, 0.0).sqrt();
    [half_tr + disc, half_tr - disc]
}

/// Smallest singular value of a 2×2 matrix.
fn sigma_min2(m: &Matrix2<f64>) -> f64 {
    let fro2 = m.iter().map(|v| v * v).sum::<f64>();
    let det = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).abs();
    let smax = ((fro2 + (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt()) / 2.0).sqrt();
    if smax == 0.0 {
        0.0
    } else {
        det / smax
    }
}

/// `c·I + M^T⊗I + σ·I⊗M'` for blocks of dimension `p`, `p'`.
pub fn kronecker_combination(c: f64, m: &DMatrix<f64>, m2: &DMatrix<f64>, sign: f64) -> DMatrix<f64> {
    let (p, p2) = (m.nrows(), m2.nrows());
    let mt = m.transpose();
    let eye = |k: usize| DMatrix::<f64>::identity(k, k);
    let mut out = eye(p * p2) * c;
    out += mt.kronecker(&eye(p2));
    out += eye(p).kronecker(m2) * sign;
    out
}

fn block_dmatrix(b: &MelnikovBlock, xi: &[f64], nb: usize) -> DMatrix<f64> {
    let m = b.analytic_matrix(xi, nb);
    if b.dim == 1 {
        DMatrix::from_element(1, 1, m[(0, 0)])
    } else {
        DMatrix::from_fn(2, 2, |i, j| m[(i, j)])
    }
}

impl MelnikovEngine {
    pub fn new(freq: &FrequencyData, cfg: MelnikovConfig) -> Result<Self, MelnikovError> {
        if !(cfg.tau > 0.0) {
            return Err(MelnikovError::InvalidConfig(format!("tau must be positive, got {}", cfg.tau)));
        }
        if !(cfg.eps > 0.0) || cfg.k_max < 1 {
            return Err(MelnikovError::InvalidConfig("need eps > 0 and k_max ≥ 1".into()));
        }
        let (d, b) = (freq.d, freq.b);
        let db = d * b;
        let lam: Vec<i64> = freq.tangential.iter().map(|s| s.norm_sq()).collect();
        let mut ks = Vec::new();
        let mut s: Vec<i64> = Vec::new();
        let mut momentum = Vec::new();
        let mut weight = Vec::new();
        for k in k_ball(db, cfg.k_max) {
            let norm: i32 = k.iter().map(|v| v.abs()).sum();
            s.push(k.iter().enumerate().map(|(idx, &v)| v as i64 * lam[idx % b]).sum());
            momentum.push(
                k.iter()
                    .enumerate()
                    .fold(Site::ORIGIN, |acc, (idx, &v)| acc + freq.tangential[idx % b].scale(v as i64)),
            );
            // k = 0 enters only the block condition; weight 1 there.
            weight.push(if norm == 0 { 1.0 } else { (norm as f64).powf(cfg.tau) });
            ks.extend(k);
        }
        let nk = s.len();

        let mut omega = Vec::with_capacity(db);
        for h in 0..d {
            for a in 0..b {
                omega.push(freq.omega[&(h, a)].clone());
            }
        }
        let mut normal0: Vec<AffineFrequency> = Vec::with_capacity(d);
        for h in 0..d {
            let any = freq
                .normal
                .iter()
                .find(|((hh, _), _)| *hh == h)
                .map(|(_, f)| AffineFrequency { quartic: 0, ..f.clone() })
                .unwrap_or_default();
            debug_assert!(freq
                .normal
                .iter()
                .filter(|((hh, _), _)| *hh == h)
                .all(|(_, f)| AffineFrequency { quartic: 0, ..f.clone() } == any));
            normal0.push(any);
        }

        let mut by_key: BTreeMap<(usize, usize, i8, usize, usize), BlockClass> = BTreeMap::new();
        // A pair's two blocks describe the same system; keep the representative.
        let representatives = freq
            .blocks
            .values()
            .filter(|blk| blk.dim == 1 || blk.class.pair().is_none_or(|p| p.n <= p.m));
        for blk in representatives {
            let e = by_key.entry(class_key(blk)).or_insert_with(|| BlockClass {
                template: blk.clone(),
                sites: HashMap::new(),
            });
            e.sites.entry((blk.momentum(), blk.quartic)).or_insert(blk.n);
        }
        let classes: Vec<BlockClass> = by_key.into_values().collect();

        let is_zero = |k: usize| ks[k * db..(k + 1) * db].iter().all(|v| *v == 0);
        let mel1: Vec<u32> = (0..nk as u32)
            .filter(|&k| s[k as usize] == 0 && momentum[k as usize] == Site::ORIGIN && !is_zero(k as usize))
            .collect();

        let mut mel2 = Vec::new();
        for (ci, c) in classes.iter().enumerate() {
            for sign in [1i8, -1] {
                // K + σp = 0 and s + σq = 0
                let list: Vec<u32> = (0..nk as u32)
                    .filter(|&k| {
                        let ku = k as usize;
                        c.sites.contains_key(&(momentum[ku].scale(-sign as i64), -(sign as i64) * s[ku]))
                    })
                    .collect();
                mel2.push(Mel2List { class: ci, sign, ks: list });
            }
        }

        // |K| and |s| over the k-ball bound which (p, q) combinations can matter.
        let pmax1 = freq.tangential.iter().map(|t| t.n1.abs()).max().unwrap_or(0) * cfg.k_max as i64;
        let pmax2 = freq.tangential.iter().map(|t| t.n2.abs()).max().unwrap_or(0) * cfg.k_max as i64;
        let qmax = lam.iter().copied().max().unwrap_or(0) * cfg.k_max as i64;
        let mut mel13 = Vec::new();
        for c1 in 0..classes.len() {
            for c2 in c1..classes.len() {
                for sign in [1i8, -1] {
                    let mut sums: HashMap<(Site, i64), (Site, Site)> = HashMap::new();
                    for (&(p, q), &n) in &classes[c1].sites {
                        for (&(p2, q2), &n2) in &classes[c2].sites {
                            let key = (p + p2.scale(sign as i64), q + sign as i64 * q2);
                            if key.0.n1.abs() <= pmax1 && key.0.n2.abs() <= pmax2 && key.1.abs() <= qmax {
                                sums.entry(key).or_insert((n, n2));
                            }
                        }
                    }
                    let list: Vec<u32> = (0..nk as u32)
                        .filter(|&k| {
                            let ku = k as usize;
                            !is_zero(ku) && sums.contains_key(&(-momentum[ku], -s[ku]))
                        })
                        .collect();
                    mel13.push(Mel13List {
                        first: c1,
                        second: c2,
                        sign,
                        ks: list,
                        sums,
                    });
                }
            }
        }
        let zero_k = (0..nk as u32).find(|&k| is_zero(k as usize)).expect("k = 0 is in the ball");
        Ok(MelnikovEngine {
            d,
            b,
            db,
            cfg,
            radius: freq.radius,
            ks,
            s,
            momentum,
            weight,
            omega,
            normal0,
            classes,
            mel1,
            mel2,
            mel13,
            zero_k,
        })
    }

    pub fn k_count(&self) -> usize {
        self.s.len()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    fn k_vec(&self, k: u32) -> &[i32] {
        &self.ks[k as usize * self.db..(k as usize + 1) * self.db]
    }

    /// `K_max·max|ω⁰| + 2·max‖M⁰‖` at `ξ`: the largest analytic part any
    /// divisor can carry.
    pub fn analytic_bound(&self, xi: &[f64]) -> f64 {
        let wmax = self.omega.iter().map(|w| w.analytic(xi, self.b).abs()).fold(0.0, f64::max);
        let mmax = self
            .classes
            .iter()
            .map(|c| c.template.analytic_matrix(xi, self.b).norm())
            .fold(0.0, f64::max);
        self.cfg.k_max as f64 * wmax + 2.0 * mmax
    }

    /// Rejects `γ ≤ 0` and configurations where `ε⁻⁴` does not dominate the
    /// analytic parts at `ξ`.
    pub fn validate(&self, xi: &[f64], gamma: f64) -> Result<(), MelnikovError> {
        if !(gamma > 0.0) {
            return Err(MelnikovError::InvalidConfig(format!("gamma must be positive, got {gamma}")));
        }
        if xi.len() != self.db {
            return Err(MelnikovError::InvalidConfig(format!("xi has {} entries, expected {}", xi.len(), self.db)));
        }
        let bound = self.analytic_bound(xi);
        let scale = self.cfg.eps.powi(-4);
        if scale - bound < gamma.max(1.0) {
            return Err(MelnikovError::InvalidConfig(format!(
                "scale separation broken: eps^-4 = {scale:.6e} vs analytic bound {bound:.6e}"
            )));
        }
        Ok(())
    }

    fn evaluate(&self, xi: &[f64], mut sink: impl FnMut(Hit)) {
        let b = self.b;
        let w0: Vec<f64> = self.omega.iter().map(|w| w.analytic(xi, b)).collect();
        let x: Vec<f64> = (0..self.s.len())
            .map(|k| self.k_vec(k as u32).iter().zip(&w0).map(|(&kv, &w)| kv as f64 * w).sum())
            .collect();
        for &k in &self.mel1 {
            let ku = k as usize;
            sink(Hit {
                cond: Condition::Mel1,
                k,
                value: x[ku].abs(),
                weight: self.weight[ku],
                ctx: HitCtx::None,
            });
        }
        let mats: Vec<Matrix2<f64>> = self.classes.iter().map(|c| c.template.analytic_matrix(xi, b)).collect();
        let eigs: Vec<Vec<Complex64>> = self
            .classes
            .iter()
            .zip(&mats)
            .map(|(c, m)| if c.template.dim == 1 { vec![Complex64::new(m[(0, 0)], 0.0)] } else { eig2(m).to_vec() })
            .collect();
        for (li, l) in self.mel2.iter().enumerate() {
            let m = mats[l.class] * l.sign as f64;
            let dim = self.classes[l.class].template.dim;
            for &k in &l.ks {
                let ku = k as usize;
                let value = if dim == 1 {
                    (x[ku] + m[(0, 0)]).abs()
                } else {
                    sigma_min2(&(Matrix2::identity() * x[ku] + m))
                };
                sink(Hit {
                    cond: Condition::Mel2,
                    k,
                    value,
                    weight: self.weight[ku],
                    ctx: HitCtx::Mel2 { list: li },
                });
            }
        }
        for (li, l) in self.mel13.iter().enumerate() {
            let nus: Vec<Complex64> = eigs[l.first]
                .iter()
                .flat_map(|a| eigs[l.second].iter().map(move |c| (*a, *c)))
                .map(|(a, c)| a + c * l.sign as f64)
                .collect();
            for &k in &l.ks {
                let ku = k as usize;
                let mut prod = Complex64::new(1.0, 0.0);
                for nu in &nus {
                    prod *= nu + x[ku];
                }
                sink(Hit {
                    cond: Condition::Mel13,
                    k,
                    value: prod.norm(),
                    weight: self.weight[ku],
                    ctx: HitCtx::Mel13 { list: li },
                });
            }
        }
        for h in 0..self.d {
            for h2 in h + 1..self.d {
                let v = (self.normal0[h].analytic(xi, b) - self.normal0[h2].analytic(xi, b)).abs();
                sink(Hit {
                    cond: Condition::Mel14,
                    k: self.zero_k,
                    value: v,
                    weight: 1.0,
                    ctx: HitCtx::Mel14 { h, h2 },
                });
            }
        }
    }

    /// `min value·|k|^τ` over all evaluated divisors: the sample fails every
    /// `γ` above this.
    pub fn critical_gamma(&self, xi: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        self.evaluate(xi, |h| best = best.min(h.value * h.weight));
        best
    }

    fn literal_mel13(&self, xi: &[f64], hit: &Hit) -> Option<f64> {
        let HitCtx::Mel13 { list } = hit.ctx else { return None };
        let l = &self.mel13[list];
        let w0: Vec<f64> = self.omega.iter().map(|w| w.analytic(xi, self.b)).collect();
        let x: f64 = self.k_vec(hit.k).iter().zip(&w0).map(|(&kv, &w)| kv as f64 * w).sum();
        let m1 = block_dmatrix(&self.classes[l.first].template, xi, self.b);
        let m2 = block_dmatrix(&self.classes[l.second].template, xi, self.b);
        Some(kronecker_combination(x, &m1, &m2, l.sign as f64).determinant().abs())
    }

    fn violation(&self, hit: &Hit) -> MelnikovViolation {
        let s = self.s[hit.k as usize];
        let (h, h_prime, n, m, sign) = match hit.ctx {
            HitCtx::None => (None, None, None, None, String::new()),
            HitCtx::Mel2 { list } => {
                let l = &self.mel2[list];
                let c = &self.classes[l.class];
                let key = (self.momentum[hit.k as usize].scale(-l.sign as i64), -(l.sign as i64) * s);
                let site = c.sites.get(&key).copied();
                (Some(c.template.h), None, site, None, sign_str(l.sign).into())
            }
            HitCtx::Mel13 { list } => {
                let l = &self.mel13[list];
                let (c1, c2) = (&self.classes[l.first], &self.classes[l.second]);
                let (n1, n2) = l.sums[&(-self.momentum[hit.k as usize], -s)];
                (
                    Some(c1.template.h),
                    Some(c2.template.h),
                    Some(n1),
                    Some(n2),
                    format!("+{}", sign_str(l.sign)),
                )
            }
            HitCtx::Mel14 { h, h2 } => (Some(h), Some(h2), None, None, String::new()),
        };
        MelnikovViolation {
            condition: hit.cond,
            k: self.k_vec(hit.k).to_vec(),
            h,
            h_prime,
            n,
            m,
            sign,
            value: hit.value,
            k_weight: hit.weight,
        }
    }

    /// Full report for one parameter value.
    pub fn check(&self, xi: &[f64], gamma: f64) -> Result<MelnikovReport, MelnikovError> {
        self.validate(xi, gamma)?;
        let mut evaluated = [0usize; 4];
        let mut worst: [Option<Hit>; 4] = [None; 4];
        let mut violations = Vec::new();
        let mut violations_total = 0usize;
        self.evaluate(xi, |hit| {
            let i = hit.cond.idx();
            evaluated[i] += 1;
            let score = hit.value * hit.weight;
            if worst[i].is_none_or(|w| score < w.value * w.weight) {
                worst[i] = Some(hit);
            }
            if score < gamma {
                violations_total += 1;
                if violations.len() < MAX_VIOLATIONS {
                    violations.push(hit);
                }
            }
        });
        let conditions = Condition::ALL
            .iter()
            .map(|&c| {
                let i = c.idx();
                let w = worst[i];
                ConditionSummary {
                    condition: c,
                    evaluated: evaluated[i],
                    worst_margin: w.map(|w| w.value * w.weight / gamma),
                    worst: w.map(|w| self.violation(&w)),
                    literal_determinant: w.and_then(|w| self.literal_mel13(xi, &w)),
                }
            })
            .collect::<Vec<_>>();
        let critical_gamma = worst
            .iter()
            .flatten()
            .map(|w| w.value * w.weight)
            .fold(f64::INFINITY, f64::min);
        Ok(MelnikovReport {
            xi: xi.to_vec(),
            gamma,
            tau: self.cfg.tau,
            eps: self.cfg.eps,
            k_max: self.cfg.k_max,
            radius: self.radius,
            k_norm: "l1",
            k_count: self.k_count(),
            block_classes: self.classes.len(),
            analytic_bound: self.analytic_bound(xi),
            conditions,
            violations: violations.iter().map(|h| self.violation(h)).collect(),
            violations_total,
            critical_gamma,
            pass: violations_total == 0,
            counting: "per (k, block class, sign) with momentum balance; r != 0 divisors pass by scale separation and are not evaluated",
        })
    }
}

const MAX_VIOLATIONS: usize = 200;

fn sign_str(s: i8) -> &'static str {
    if s > 0 {
        "+"
    } else {
        "-"
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MelnikovViolation {
    pub condition: Condition,
    pub k: Vec<i32>,
    pub h: Option<usize>,
    pub h_prime: Option<usize>,
    pub n: Option<Site>,
    pub m: Option<Site>,
    pub sign: String,
    pub value: f64,
    pub k_weight: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    /// Divisors with `r = 0` that were evaluated numerically.
    pub evaluated: usize,
    /// `value·|k|^τ/γ` at the worst divisor; pass iff ≥ 1.
    pub worst_margin: Option<f64>,
    pub worst: Option<MelnikovViolation>,
    /// Kronecker determinant recomputed directly at the worst `Mel13` divisor.
    pub literal_determinant: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MelnikovReport {
    pub xi: Vec<f64>,
    pub gamma: f64,
    pub tau: f64,
    pub eps: f64,
    pub k_max: i32,
    pub radius: i64,
    pub k_norm: &'static str,
    pub k_count: usize,
    pub block_classes: usize,
    pub analytic_bound: f64,
    pub conditions: Vec<ConditionSummary>,
    pub violations: Vec<MelnikovViolation>,
    pub violations_total: usize,
    pub critical_gamma: f64,
    pub pass: bool,
    pub counting: &'static str,
}

/// Checks (Mel1), (Mel2), (Mel13) and (Mel14) at one `ξ`.
pub fn check_conditions(
    xi: &[f64],
    gamma: f64,
    cfg: MelnikovConfig,
    freq: &FrequencyData,
) -> Result<MelnikovReport, MelnikovError> {
    MelnikovEngine::new(freq, cfg)?.check(xi, gamma)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanRow {
    pub gamma: f64,
    pub excluded: usize,
    pub excluded_fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
    pub samples: usize,
    pub seed: u64,
    pub tau: f64,
    pub eps: f64,
    pub k_max: i32,
    pub radius: i64,
    pub k_count: usize,
    /// Least-squares slope of `log fraction` against `log γ` over nonzero fractions.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// `fraction/γ^{1/4}` per row.
    pub quarter_power_constants: Vec<f64>,
    pub monotone: bool,
}

/// Wilson score interval at `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Monte-Carlo estimate of the excluded fraction of the box for each `γ`.
/// Samples are drawn sequentially from `seed`; evaluation is parallel and
/// reduced in sample order.
pub fn scan_measure(
    freq: &FrequencyData,
    pbox: &ParameterBox,
    gammas: &[f64],
    cfg: MelnikovConfig,
    samples: usize,
    seed: u64,
) -> Result<ScanTable, MelnikovError> {
    if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(MelnikovError::InvalidConfig("gamma list must be non-empty and positive".into()));
    }
    if pbox.d != freq.d || pbox.b != freq.b {
        return Err(MelnikovError::InvalidConfig("parameter box does not match the frequency data".into()));
    }
    let engine = MelnikovEngine::new(freq, cfg)?;
    let gmax = gammas.iter().copied().fold(0.0, f64::max);
    engine.validate(&pbox.upper_corner(), gmax)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..samples).map(|_| pbox.sample(&mut rng)).collect();
    let crit: Vec<f64> = points.par_iter().map(|xi| engine.critical_gamma(xi)).collect();
    let rows: Vec<ScanRow> = gammas
        .iter()
        .map(|&g| {
            let excluded = crit.iter().filter(|&&c| c < g).count();
            let (lo, hi) = wilson_interval(excluded, samples, 1.96);
            ScanRow {
                gamma: g,
                excluded,
                excluded_fraction: excluded as f64 / samples as f64,
                ci_low: lo,
                ci_high: hi,
            }
        })
        .collect();
    let mut sorted: Vec<&ScanRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.gamma.partial_cmp(&b.gamma).unwrap());
    let monotone = sorted.windows(2).all(|w| w[0].excluded <= w[1].excluded);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.excluded > 0)
        .map(|r| (r.gamma.ln(), r.excluded_fraction.ln()))
        .collect();
    let (slope, intercept) = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 {
            (Some(sxy / sxx), Some(my - sxy / sxx * mx))
        } else {
            (None, None)
        }
    } else {
        (None, None)
    };
    Ok(ScanTable {
        quarter_power_constants: rows.iter().map(|r| r.excluded_fraction / r.gamma.powf(0.25)).collect(),
        rows,
        samples,
        seed,
        tau: cfg.tau,
        eps: cfg.eps,
        k_max: cfg.k_max,
        radius: freq.radius,
        k_count: engine.k_count(),
        slope,
        intercept,
        monotone,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct NondegeneracyCheck {
    /// Full `db×db` Jacobian `∂ω/∂ξ` in units of `1/(4π²)`.
    pub jacobian: Vec<Vec<i64>>,
    pub block_diagonal: bool,
    pub det_units: i128,
    pub block_product_units: i128,
    pub det: f64,
    pub pass: bool,
}

/// (A1): the tangential frequency map has a nonsingular, block-diagonal Jacobian.
pub fn check_nondegeneracy(freq: &FrequencyData) -> NondegeneracyCheck {
    let (d, b) = (freq.d, freq.b);
    let db = d * b;
    let mut jac = vec![vec![0i64; db]; db];
    for ((h, a), w) in &freq.omega {
        for ((h2, c), r) in &w.lin {
            assert!(r.is_integer(), "frequency slopes are integral in units of 1/(4π²)");
            jac[h * b + a][h2 * b + c] = r.to_integer();
        }
    }
    let block_diagonal = (0..db).all(|r| (0..db).all(|c| r / b == c / b || jac[r][c] == 0));
    let det_units = bareiss_det(jac.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect());
    let block = verify_nondegeneracy(b).det_units;
    let block_product_units = (0..d).fold(1i128, |acc, _| acc * block);
    let det = det_units as f64 / (4.0 * PI * PI).powi(db as i32);
    NondegeneracyCheck {
        jacobian: jac,
        block_diagonal,
        det_units,
        block_product_units,
        det,
        pass: block_diagonal && det_units != 0 && det_units == block_product_units,
    }
}

/// Exact minimum of the (Mel14) gap `|Ω⁰_h − Ω⁰_{h+1}|` over the box, from
/// its affine form.
pub fn mel14_box_margin(freq: &FrequencyData, pbox: &ParameterBox) -> f64 {
    let mut worst = f64::INFINITY;
    for h in 0..freq.d.saturating_sub(1) {
        let pick = |hh: usize| {
            freq.normal
                .iter()
                .find(|((x, _), _)| *x == hh)
                .map(|(_, f)| f.clone())
                .expect("normal frequency")
        };
        let diff = pick(h).sub(&pick(h + 1));
        // Affine in ξ: extremes at the box corners, coordinate by coordinate.
        let c0 = diff.constant.to_f64().unwrap();
        let (mut lo, mut hi) = (c0, c0);
        for ((hh, _), r) in &diff.lin {
            let (l, u) = pbox.bounds(*hh);
            let c = r.to_f64().unwrap();
            lo += (c * l).min(c * u);
            hi += (c * l).max(c * u);
        }
        let gap = if lo > 0.0 {
            lo
        } else if hi < 0.0 {
            -hi
        } else {
            0.0
        };
        worst = worst.min(gap / (4.0 * PI * PI));
    }
    worst
}
