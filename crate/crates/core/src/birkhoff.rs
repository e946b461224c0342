//! Cubic partial Birkhoff normal form and the frequency data it produces.
//!
//! The homological field `F` removes every cubic term with at least two
//! tangential indices and a nonzero small divisor. What survives at cubic
//! order are the integrable self/cross-action terms, the diagonal normal
//! shifts and the first/second-type couplings, whose coefficients give the
//! closed-form tangential and normal frequencies used by the Melnikov stage.
//!
//! Frequencies are affine in `ξ` with rational coefficients in units of
//! `1/(4π²)`, plus an integer multiple of `ε⁻⁴`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::Matrix2;
use num_complex::Complex64;
use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::lattice::{LatticeError, ResonanceKind, ResonantPair, Site, SiteAtlas, SiteClass, TangentialSet};
use crate::polyvf::{
    bracket_product_stats, check_momentum, check_reversible, divisor, lie_bracket, ModeVar, Monomial,
    PolyError, PolyVectorField, Sign, PRUNE_TOL,
};

#[derive(Debug, Error)]
pub enum BirkhoffError {
    #[error("selected term {target} <- {mono} has zero divisor (unexpected resonance)")]
    ZeroDivisor { target: String, mono: String },
    #[error("term {target} <- {mono} matches a resonant family but has divisor {divisor}")]
    Misclassified { target: String, mono: String, divisor: i64 },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Resonant cubic families that stay in the normal form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Family {
    /// `|q_i|² q_i ∂_{q_i}`.
    SelfAction,
    /// `|q_j|² q_i ∂_{q_i}`, `j ≠ i`.
    CrossAction,
    /// `|q_i|² z_n ∂_{z_n}`.
    NormalDiagonal,
    /// `q̄_i q_j z_m ∂_{z_n}` on a first-type pair.
    FirstType,
    /// `q_i q_j z̄_m ∂_{z_n}` on a second-type pair.
    SecondType,
    /// `q_i z_n z̄_m ∂_{q_j}`: the tangential image of a first-type coupling.
    TangentialFirst,
    /// `z_n z_m q̄_i ∂_{q_j}`: the tangential image of a second-type coupling.
    TangentialSecond,
    /// `|z_n|² q_i ∂_{q_i}`.
    TangentialDiagonal,
}

impl Family {
    /// Normal-form coefficient per unit `ε`.
    pub fn expected_coeff(self) -> Complex64 {
        let base = 1.0 / (4.0 * PI * PI);
        match self {
            Family::SelfAction => Complex64::new(0.0, base),
            _ => Complex64::new(0.0, 2.0 * base),
        }
    }
}

/// How the homological step treats a cubic term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermRole {
    /// Fewer than two tangential indices: left in the remainder.
    Untouched,
    /// Resonant: stays in the normal form.
    Resonant(Family),
    /// Removed by `F`; carries the nonzero divisor.
    Removed(i64),
}

fn tangential_count(atlas: &SiteAtlas, target: ModeVar, mono: &Monomial) -> usize {
    std::iter::once(target)
        .chain(mono.slots())
        .filter(|v| atlas.is_tangential(v.n))
        .count()
}

fn first_pair_matches(atlas: &SiteAtlas, n: Site, m: Site, i: Site, j: Site) -> bool {
    matches!(atlas.class(n), Some(SiteClass::FirstType(p)) if p.m == m && p.i == i && p.j == j)
}

fn second_pair_matches(atlas: &SiteAtlas, n: Site, m: Site, a: Site, b: Site) -> bool {
    matches!(atlas.class(n), Some(SiteClass::SecondType(p))
        if p.m == m && ((p.i == a && p.j == b) || (p.i == b && p.j == a)))
}

/// Recognises the resonant family of a `q`-target term `q_x q_y q̄_w ∂_{q_v}`
/// from the lattice classification alone.
fn family_of(atlas: &SiteAtlas, target: ModeVar, mono: &Monomial) -> Option<Family> {
    if mono.degree() != 3 || target.sign != Sign::Plus {
        return None;
    }
    let slots: Vec<ModeVar> = mono.slots().collect();
    if slots.iter().any(|s| s.h != target.h) {
        return None;
    }
    let plus: Vec<Site> = slots.iter().filter(|s| s.sign == Sign::Plus).map(|s| s.n).collect();
    let minus: Vec<Site> = slots.iter().filter(|s| s.sign == Sign::Minus).map(|s| s.n).collect();
    if plus.len() != 2 {
        return None;
    }
    let (x, y, w, v) = (plus[0], plus[1], minus[0], target.n);
    let t = |s: Site| atlas.is_tangential(s);
    let count = [x, y, w, v].iter().filter(|s| t(**s)).count();
    match count {
        4 => {
            let lhs: BTreeSet<_> = [x, y].into();
            let rhs: BTreeSet<_> = [w, v].into();
            if x == y && w == v && x == w {
                Some(Family::SelfAction)
            } else if x != y && lhs == rhs {
                Some(Family::CrossAction)
            } else {
                None
            }
        }
        2 => {
            if t(x) && t(y) {
                return second_pair_matches(atlas, v, w, x, y).then_some(Family::SecondType);
            }
            if t(w) && t(v) {
                return second_pair_matches(atlas, x, y, w, v).then_some(Family::TangentialSecond);
            }
            let (tp, other) = if t(x) { (x, y) } else { (y, x) };
            if t(w) {
                if tp == w {
                    return Some(Family::NormalDiagonal);
                }
                return first_pair_matches(atlas, v, other, w, tp).then_some(Family::FirstType);
            }
            if tp == v {
                return Some(Family::TangentialDiagonal);
            }
            first_pair_matches(atlas, other, w, tp, v).then_some(Family::TangentialFirst)
        }
        _ => None,
    }
}

fn describe(target: ModeVar, mono: &Monomial) -> (String, String) {
    (target.to_string(), mono.to_string())
}

/// Decides whether `F` removes a cubic term. `q̄`-target terms are judged by
/// their `S`-image.
pub fn term_role(atlas: &SiteAtlas, target: ModeVar, mono: &Monomial) -> Result<TermRole, BirkhoffError> {
    let (t, m) = if target.sign == Sign::Plus {
        (target, mono.clone())
    } else {
        (target.conj(), mono.swapped())
    };
    if tangential_count(atlas, t, &m) < 2 {
        return Ok(TermRole::Untouched);
    }
    let delta = divisor(t, &m);
    match family_of(atlas, t, &m) {
        Some(f) if delta == 0 => Ok(TermRole::Resonant(f)),
        Some(_) => {
            let (target, mono) = describe(target, mono);
            Err(BirkhoffError::Misclassified { target, mono, divisor: delta })
        }
        None if delta == 0 => {
            let (target, mono) = describe(target, mono);
            Err(BirkhoffError::ZeroDivisor { target, mono })
        }
        None => Ok(TermRole::Removed(divisor(target, mono))),
    }
}

/// The homological field: for every removed term `c μ ∂_v` with divisor `δ`,
/// `F` carries `c/(iδ) μ ∂_v`, so that `[F, Λ]` cancels it.
pub fn solve_homological(p3: &PolyVectorField, tangential: &TangentialSet) -> Result<PolyVectorField, BirkhoffError> {
    let atlas = SiteAtlas::build(tangential, p3.radius())?;
    solve_homological_with(p3, &atlas)
}

pub fn solve_homological_with(p3: &PolyVectorField, atlas: &SiteAtlas) -> Result<PolyVectorField, BirkhoffError> {
    let mut f = PolyVectorField::new(p3.d(), p3.radius());
    for (target, mono, c) in p3.iter() {
        if let TermRole::Removed(delta) = term_role(atlas, target, mono)? {
            f.add_term(target, mono.clone(), c / Complex64::new(0.0, delta as f64));
        }
    }
    Ok(f)
}

/// `X + [F, X_lin]`: the time-1 pushforward truncated at cubic order. The
/// result is not pruned, so cancellation residue remains visible.
pub fn pushforward_order3(x: &PolyVectorField, f: &PolyVectorField) -> Result<PolyVectorField, BirkhoffError> {
    let lin = x.degree_part(1);
    Ok(x.add(&lie_bracket(f, &lin)?)?)
}

/// Raw size of the degree-5 terms `[F, P₃ − ½ P_sel]` discarded by the
/// cubic truncation.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Degree5Stats {
    pub raw_products: usize,
    pub coeff_abs_sum: f64,
    pub max_abs_coeff: f64,
}

pub fn degree5_stats(x: &PolyVectorField, f: &PolyVectorField) -> Result<Degree5Stats, BirkhoffError> {
    let lin = x.degree_part(1);
    let cubic = x.degree_part(3);
    // [F, Λ] = −P_sel
    let half_sel = lie_bracket(f, &lin)?.scaled(Complex64::new(0.5, 0.0));
    let y = cubic.add(&half_sel)?;
    let (raw_products, coeff_abs_sum, max_abs_coeff) = bracket_product_stats(f, &y);
    Ok(Degree5Stats {
        raw_products,
        coeff_abs_sum,
        max_abs_coeff,
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FStats {
    pub terms: usize,
    pub min_abs_divisor: i64,
    pub max_abs_divisor: i64,
    pub max_abs_coeff: f64,
}

/// Row of the CSV of `F` terms.
#[derive(Clone, Debug, Serialize)]
pub struct FTerm {
    pub h: usize,
    pub target: String,
    pub monomial: String,
    pub divisor: i64,
    pub coeff_re: f64,
    pub coeff_im: f64,
}

pub fn f_terms(f: &PolyVectorField) -> Vec<FTerm> {
    f.iter()
        .map(|(t, m, c)| FTerm {
            h: t.h,
            target: t.to_string(),
            monomial: m.to_string(),
            divisor: divisor(t, m),
            coeff_re: c.re,
            coeff_im: c.im,
        })
        .collect()
}

pub fn f_stats(f: &PolyVectorField) -> FStats {
    let divs: Vec<i64> = f.iter().map(|(t, m, _)| divisor(t, m).abs()).collect();
    FStats {
        terms: f.len(),
        min_abs_divisor: divs.iter().copied().min().unwrap_or(0),
        max_abs_divisor: divs.iter().copied().max().unwrap_or(0),
        max_abs_coeff: f.max_abs_coeff(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResonantEntry {
    pub family: Family,
    pub h: usize,
    pub target: String,
    pub monomial: String,
    pub expected: Complex64,
    pub found: Complex64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalFormReport {
    pub d: usize,
    pub radius: i64,
    /// Worst `|c|` over cubic terms with ≥2 tangential indices outside the
    /// resonant families.
    pub residual_nonresonant: f64,
    pub resonant_table: Vec<ResonantEntry>,
    /// Family terms predicted by the lattice classification but absent.
    pub missing: Vec<String>,
    pub max_rel_err: f64,
    pub mismatches: usize,
    /// Worst `|c|` of cubic terms mixing components.
    pub cross_component_max: f64,
    pub family_counts: BTreeMap<String, usize>,
    pub f_stats: FStats,
    pub degree5: Degree5Stats,
    pub reversible: bool,
    pub momentum: bool,
    pub tolerance: f64,
    pub pass: bool,
}

pub const NORMAL_FORM_TOL: f64 = 1e-12;

/// The family terms that must appear in the normal form, keyed by `q`-target.
fn expected_family_terms(atlas: &SiteAtlas, d: usize) -> BTreeMap<(ModeVar, Monomial), Family> {
    let radius = atlas.radius();
    let tang = atlas.tangential().sites();
    let mut out = BTreeMap::new();
    for h in 0..d {
        let q = |n| ModeVar::q(h, n);
        let qb = |n| ModeVar::qbar(h, n);
        for &i in tang {
            out.insert((q(i), Monomial::from_vars([q(i), q(i), qb(i)])), Family::SelfAction);
            for &j in tang.iter().filter(|&&j| j != i) {
                out.insert((q(i), Monomial::from_vars([q(i), q(j), qb(j)])), Family::CrossAction);
            }
        }
        for (&n, class) in atlas.iter() {
            match class {
                SiteClass::Tangential => {}
                SiteClass::Generic | SiteClass::FirstType(_) | SiteClass::SecondType(_) => {
                    for &i in tang {
                        out.insert((q(n), Monomial::from_vars([q(i), q(n), qb(i)])), Family::NormalDiagonal);
                        out.insert((q(i), Monomial::from_vars([q(i), q(n), qb(n)])), Family::TangentialDiagonal);
                    }
                }
            }
            if let Some(p) = class.pair() {
                if !p.m.within(radius) {
                    continue;
                }
                match p.kind {
                    ResonanceKind::First => {
                        out.insert((q(n), Monomial::from_vars([qb(p.i), q(p.j), q(p.m)])), Family::FirstType);
                        out.insert((q(p.j), Monomial::from_vars([q(p.i), q(n), qb(p.m)])), Family::TangentialFirst);
                    }
                    ResonanceKind::Second => {
                        out.insert((q(n), Monomial::from_vars([q(p.i), q(p.j), qb(p.m)])), Family::SecondType);
                        for (a, b) in [(p.i, p.j), (p.j, p.i)] {
                            out.insert((q(a), Monomial::from_vars([q(n), q(p.m), qb(b)])), Family::TangentialSecond);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Tabulates the resonant families of the transformed field against their
/// expected coefficients and measures what is left of the removed terms.
pub fn extract_normal_form(
    xt: &PolyVectorField,
    atlas: &SiteAtlas,
    f: &PolyVectorField,
    degree5: Degree5Stats,
) -> Result<NormalFormReport, BirkhoffError> {
    let cubic = xt.degree_part(3);
    let mut residual = 0.0f64;
    let mut cross = 0.0f64;
    let mut table = Vec::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let expected = expected_family_terms(atlas, xt.d());
    let mut seen = BTreeSet::new();
    for (target, mono, c) in cubic.iter() {
        if mono.vars().any(|v| v.h != target.h) {
            cross = cross.max(c.norm());
            continue;
        }
        let (t, m) = if target.sign == Sign::Plus {
            (target, mono.clone())
        } else {
            (target.conj(), mono.swapped())
        };
        if tangential_count(atlas, t, &m) < 2 {
            continue;
        }
        match family_of(atlas, t, &m) {
            Some(fam) if divisor(t, &m) == 0 => {
                if target.sign == Sign::Minus {
                    continue;
                }
                let exp = fam.expected_coeff();
                let rel_err = (c - exp).norm() / exp.norm();
                *counts.entry(format!("{fam:?}")).or_default() += 1;
                seen.insert((t, m));
                table.push(ResonantEntry {
                    family: fam,
                    h: target.h,
                    target: target.to_string(),
                    monomial: mono.to_string(),
                    expected: exp,
                    found: c,
                    rel_err,
                });
            }
            _ => residual = residual.max(c.norm()),
        }
    }
    let missing: Vec<String> = expected
        .iter()
        .filter(|(k, _)| !seen.contains(*k))
        .map(|((t, m), fam)| format!("{fam:?}: {t} <- {m}"))
        .collect();
    let max_rel_err = table.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let mismatches = table.iter().filter(|e| e.rel_err >= NORMAL_FORM_TOL).count() + missing.len();
    let mut pruned = xt.clone();
    pruned.prune(PRUNE_TOL);
    let reversible = check_reversible(&pruned);
    let momentum = check_momentum(&pruned, 1) && check_momentum(&pruned, 2);
    let pass = residual < NORMAL_FORM_TOL && mismatches == 0 && cross == 0.0 && reversible && momentum;
    Ok(NormalFormReport {
        d: xt.d(),
        radius: xt.radius(),
        residual_nonresonant: residual,
        resonant_table: table,
        missing,
        max_rel_err,
        mismatches,
        cross_component_max: cross,
        family_counts: counts,
        f_stats: f_stats(f),
        degree5,
        reversible,
        momentum,
        tolerance: NORMAL_FORM_TOL,
        pass,
    })
}

/// Output of [`normal_form_pipeline`].
#[derive(Clone, Debug)]
pub struct NormalForm {
    pub f: PolyVectorField,
    pub transformed: PolyVectorField,
    pub report: NormalFormReport,
}

/// `Λ + P⁰` at radius `R`, then `F`, the pushforward and the report.
pub fn normal_form_pipeline(d: usize, tangential: &TangentialSet, radius: i64) -> Result<NormalForm, BirkhoffError> {
    let atlas = SiteAtlas::build(tangential, radius)?;
    let p3 = crate::polyvf::build_cubic_p0(d, radius);
    let x = crate::polyvf::build_linear(d, radius).add(&p3)?;
    let f = solve_homological_with(&p3, &atlas)?;
    let transformed = pushforward_order3(&x, &f)?;
    let deg5 = degree5_stats(&x, &f)?;
    let report = extract_normal_form(&transformed, &atlas, &f, deg5)?;
    Ok(NormalForm { f, transformed, report })
}

fn ser_rational<S: Serializer>(r: &Rational64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

fn ser_lin<S: Serializer>(m: &BTreeMap<(usize, usize), Rational64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(m.iter().map(|((h, a), r)| (h, a, r.to_string())))
}

fn ser_pairs<K: Serialize, V: Serialize, S: Serializer>(m: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(m.iter())
}

/// `quartic·ε⁻⁴ + (constant + Σ lin_{h,a} ξ_{h,a})/(4π²)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AffineFrequency {
    pub quartic: i64,
    #[serde(serialize_with = "ser_rational")]
    pub constant: Rational64,
    #[serde(serialize_with = "ser_lin")]
    pub lin: BTreeMap<(usize, usize), Rational64>,
}

impl AffineFrequency {
    pub fn add(&self, other: &AffineFrequency) -> AffineFrequency {
        let mut out = self.clone();
        out.quartic += other.quartic;
        out.constant += other.constant;
        for (k, v) in &other.lin {
            *out.lin.entry(*k).or_insert_with(Rational64::zero) += *v;
        }
        out.lin.retain(|_, v| !v.is_zero());
        out
    }

    pub fn neg(&self) -> AffineFrequency {
        AffineFrequency {
            quartic: -self.quartic,
            constant: -self.constant,
            lin: self.lin.iter().map(|(k, v)| (*k, -*v)).collect(),
        }
    }

    pub fn sub(&self, other: &AffineFrequency) -> AffineFrequency {
        self.add(&other.neg())
    }

    /// The `ξ`-dependent part, with `ξ` flat and `h`-major (`b` entries per component).
    pub fn analytic(&self, xi: &[f64], b: usize) -> f64 {
        let lin: f64 = self
            .lin
            .iter()
            .map(|((h, a), r)| r.to_f64().unwrap() * xi[h * b + a])
            .sum();
        (self.constant.to_f64().unwrap() + lin) / (4.0 * PI * PI)
    }

    pub fn eval(&self, xi: &[f64], b: usize, eps: f64) -> f64 {
        self.quartic as f64 / eps.powi(4) + self.analytic(xi, b)
    }
}

/// `ω_{h,a}`: `|i_a|²` plus `(ξ_{h,a} + 2 Σ_{c≠a} ξ_{h,c})/(4π²)`.
pub fn tangential_frequency(tangential: &TangentialSet, h: usize, a: usize) -> AffineFrequency {
    let b = tangential.len();
    let lin = (0..b)
        .map(|c| ((h, c), Rational64::from_integer(if c == a { 1 } else { 2 })))
        .collect();
    AffineFrequency {
        quartic: tangential.sites()[a].norm_sq(),
        constant: Rational64::zero(),
        lin,
    }
}

/// `Ω_{h,n}`: `|n|²` plus `2 Σ_c ξ_{h,c}/(4π²)`.
pub fn normal_frequency(b: usize, h: usize, n: Site) -> AffineFrequency {
    AffineFrequency {
        quartic: n.norm_sq(),
        constant: Rational64::zero(),
        lin: (0..b).map(|c| ((h, c), Rational64::from_integer(2))).collect(),
    }
}

/// Coupling `A = sqrt(ξ_{h,a} ξ_{h,c})/(2π²)` between tangential slots `a`, `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Coupling {
    pub h: usize,
    pub a: usize,
    pub c: usize,
}

impl Coupling {
    pub fn value(&self, xi: &[f64], b: usize) -> f64 {
        (xi[self.h * b + self.a] * xi[self.h * b + self.c]).sqrt() / (2.0 * PI * PI)
    }
}

/// Normal-frequency block `M_{h,n}`: a scalar on generic sites, a 2×2 matrix
/// on resonant pairs. The `ε⁻⁴` part is always `quartic · I`.
#[derive(Clone, Debug, Serialize)]
pub struct MelnikovBlock {
    pub h: usize,
    pub n: Site,
    pub dim: usize,
    pub class: SiteClass,
    pub quartic: i64,
    /// Diagonal entries (with their quartic parts).
    pub diag: Vec<AffineFrequency>,
    pub coupling: Option<Coupling>,
    /// Sign of the lower-left coupling entry: `+1` on first-type, `−1` on second-type pairs.
    pub lower_sign: i8,
}

impl MelnikovBlock {
    /// The `ξ`-dependent matrix; the full block is `quartic·ε⁻⁴·I` plus this.
    pub fn analytic_matrix(&self, xi: &[f64], b: usize) -> Matrix2<f64> {
        let d0 = self.diag[0].analytic(xi, b);
        if self.dim == 1 {
            return Matrix2::new(d0, 0.0, 0.0, 0.0);
        }
        let d1 = self.diag[1].analytic(xi, b);
        let a = self.coupling.map(|c| c.value(xi, b)).unwrap_or(0.0);
        Matrix2::new(d0, a, self.lower_sign as f64 * a, d1)
    }

    /// Lattice momentum carried by the block's variables once the tangential
    /// phases are rotated out: `n + i` on first-type, `n − i` on second-type
    /// pairs, `n` otherwise.
    pub fn momentum(&self) -> Site {
        match (self.dim, self.class) {
            (2, SiteClass::FirstType(p)) => self.n + p.i,
            (2, SiteClass::SecondType(p)) => self.n - p.i,
            _ => self.n,
        }
    }

    pub fn matrix(&self, xi: &[f64], b: usize, eps: f64) -> Matrix2<f64> {
        let q = self.quartic as f64 / eps.powi(4);
        let mut m = self.analytic_matrix(xi, b);
        m[(0, 0)] += q;
        if self.dim == 2 {
            m[(1, 1)] += q;
        }
        m
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FrequencyData {
    pub d: usize,
    pub b: usize,
    pub radius: i64,
    pub tangential: Vec<Site>,
    #[serde(serialize_with = "ser_pairs")]
    pub omega: BTreeMap<(usize, usize), AffineFrequency>,
    #[serde(rename = "Omega", serialize_with = "ser_pairs")]
    pub normal: BTreeMap<(usize, Site), AffineFrequency>,
    #[serde(rename = "A", serialize_with = "ser_pairs")]
    pub couplings: BTreeMap<(usize, ResonantPair), Coupling>,
    #[serde(skip)]
    pub blocks: BTreeMap<(usize, Site), MelnikovBlock>,
}

impl FrequencyData {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Closed-form frequency data for every normal site of the atlas whose block
/// fits inside the disk.
pub fn frequencies(atlas: &SiteAtlas, d: usize) -> FrequencyData {
    let tang = atlas.tangential();
    let b = tang.len();
    let idx = |s: Site| tang.index_of(s).expect("tangential site");
    let mut omega = BTreeMap::new();
    let mut normal = BTreeMap::new();
    let mut couplings = BTreeMap::new();
    let mut blocks = BTreeMap::new();
    for h in 0..d {
        for a in 0..b {
            omega.insert((h, a), tangential_frequency(tang, h, a));
        }
        for (&n, class) in atlas.iter() {
            if matches!(class, SiteClass::Tangential) {
                continue;
            }
            let om_n = normal_frequency(b, h, n);
            normal.insert((h, n), om_n.clone());
            let block = match class {
                SiteClass::FirstType(p) | SiteClass::SecondType(p) if p.m.within(atlas.radius()) => {
                    // The partner's second-type block pairs it with j, making it
                    // the conjugate system of the representative's block.
                    let p = if p.kind == ResonanceKind::Second && n > p.m {
                        ResonantPair { i: p.j, j: p.i, ..*p }
                    } else {
                        *p
                    };
                    let class = match p.kind {
                        ResonanceKind::First => SiteClass::FirstType(p),
                        ResonanceKind::Second => SiteClass::SecondType(p),
                    };
                    let (ai, aj) = (idx(p.i), idx(p.j));
                    let om_m = normal_frequency(b, h, p.m);
                    let (wi, wj) = (&omega[&(h, ai)], &omega[&(h, aj)]);
                    let coupling = Coupling { h, a: ai, c: aj };
                    couplings.insert((h, p.canonical()), coupling);
                    let (diag, lower_sign) = if p.kind == ResonanceKind::First {
                        (vec![om_n.add(wi), om_m.add(wj)], 1)
                    } else {
                        (vec![om_n.sub(wi), om_m.neg().add(wj)], -1)
                    };
                    debug_assert_eq!(diag[0].quartic, diag[1].quartic);
                    MelnikovBlock {
                        h,
                        n,
                        dim: 2,
                        class,
                        quartic: diag[0].quartic,
                        diag,
                        coupling: Some(coupling),
                        lower_sign,
                    }
                }
                // Pairs whose partner leaves the disk degrade to scalars here.
                _ => MelnikovBlock {
                    h,
                    n,
                    dim: 1,
                    class: *class,
                    quartic: om_n.quartic,
                    diag: vec![om_n],
                    coupling: None,
                    lower_sign: 1,
                },
            };
            blocks.insert((h, n), block);
        }
    }
    FrequencyData {
        d,
        b,
        radius: atlas.radius(),
        tangential: tang.sites().to_vec(),
        omega,
        normal,
        couplings,
        blocks,
    }
}

/// Exact determinant of an integer matrix by fraction-free elimination.
pub fn bareiss_det(mut m: Vec<Vec<i128>>) -> i128 {
    let n = m.len();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n {
        if m[k][k] == 0 {
            match (k + 1..n).find(|&r| m[r][k] != 0) {
                Some(r) => {
                    m.swap(k, r);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) / prev;
            }
        }
        prev = m[k][k];
    }
    sign * m[n - 1][n - 1]
}

#[derive(Clone, Debug, Serialize)]
pub struct Nondegeneracy {
    pub b: usize,
    /// `∂ω_h/∂ξ_h` in units of `1/(4π²)`.
    pub jacobian: Vec<Vec<i64>>,
    /// Determinant of `jacobian` (units `(4π²)^{-b}`).
    pub det_units: i128,
    /// `(−1)^{b−1}(2b−1)`.
    pub closed_form: i128,
    pub det: f64,
}

/// Jacobian of the tangential frequencies of one component with respect to
/// its own `ξ`, read off the affine formulas.
pub fn verify_nondegeneracy(b: usize) -> Nondegeneracy {
    assert!(b >= 1, "b must be positive");
    // Only the count of tangential sites matters for the Jacobian.
    let sites: Vec<Site> = (0..b as i64).map(|k| Site::new(k + 1, 0)).collect();
    let tang = TangentialSet::new(sites).expect("distinct sites");
    let jac: Vec<Vec<i64>> = (0..b)
        .map(|a| {
            let w = tangential_frequency(&tang, 0, a);
            (0..b).map(|c| w.lin.get(&(0, c)).map(|r| r.to_integer()).unwrap_or(0)).collect()
        })
        .collect();
    let det_units = bareiss_det(jac.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect());
    let closed_form = if b % 2 == 1 { 1 } else { -1 } * (2 * b as i128 - 1);
    let det = det_units as f64 / (4.0 * PI * PI).powi(b as i32);
    Nondegeneracy {
        b,
        jacobian: jac,
        det_units,
        closed_form,
        det,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyvf::{build_cubic_p0, build_linear};
    use approx::assert_relative_eq;

    fn pm() -> TangentialSet {
        TangentialSet::new(vec![Site::new(1, 0), Site::new(-1, 0)]).unwrap()
    }

    #[test]
    fn f_coefficient_example() {
        let tang = pm();
        let p3 = build_cubic_p0(1, 3);
        let f = solve_homological(&p3, &tang).unwrap();
        // q_i q_n q̄_j ∂_{q_m}: i − j + n − m = 0, divisor 1 − 1 + 1 − 5 = −4.
        let (i, j, n, m) = (Site::new(1, 0), Site::new(-1, 0), Site::new(0, 1), Site::new(2, 1));
        let mono = Monomial::from_vars([ModeVar::q(0, i), ModeVar::q(0, n), ModeVar::qbar(0, j)]);
        assert_eq!(divisor(ModeVar::q(0, m), &mono), -4);
        let c = f.coeff(ModeVar::q(0, m), &mono);
        // 2·(i/4π²)/(i·(−4)) per unit ε: magnitude 1/(8π²), real.
        assert_relative_eq!(c.re, -1.0 / (8.0 * PI * PI), epsilon = 1e-16);
        assert_eq!(c.im, 0.0);
        // One ordered contribution has magnitude 1/(16π²).
        assert_relative_eq!(c.norm() / 2.0, 1.0 / (16.0 * PI * PI), epsilon = 1e-16);
    }

    #[test]
    fn low_tangential_terms_and_resonances_stay_out_of_f() {
        let tang = pm();
        let radius = 3;
        let atlas = SiteAtlas::build(&tang, radius).unwrap();
        let p3 = build_cubic_p0(1, radius);
        let f = solve_homological(&p3, &tang).unwrap();
        for (t, m, _) in f.iter() {
            assert!(tangential_count(&atlas, t, m) >= 2);
            assert_ne!(divisor(t, m), 0);
        }
        let q = |n| ModeVar::q(0, n);
        let qb = |n| ModeVar::qbar(0, n);
        let (a, b) = (Site::new(1, 0), Site::new(-1, 0));
        let (n, m) = (Site::new(0, 1), Site::new(0, -1));
        // second-type coupling q_a q_b z̄_m ∂_{z_n}
        let l2 = Monomial::from_vars([q(a), q(b), qb(m)]);
        assert!(p3.coeff(q(n), &l2).norm() > 0.0);
        assert_eq!(f.coeff(q(n), &l2), Complex64::new(0.0, 0.0));
        // one tangential index
        let low = Monomial::from_vars([q(a), q(n), qb(Site::new(1, 1))]);
        assert!(p3.coeff(q(Site::new(0, 0)), &low).norm() > 0.0);
        assert_eq!(f.coeff(q(Site::new(0, 0)), &low), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn zero_f_leaves_field_unchanged() {
        let x = build_linear(1, 2).add(&build_cubic_p0(1, 2)).unwrap();
        let y = pushforward_order3(&x, &PolyVectorField::new(1, 2)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn homological_identity() {
        let tang = pm();
        let p3 = build_cubic_p0(2, 3);
        let f = solve_homological(&p3, &tang).unwrap();
        let atlas = SiteAtlas::build(&tang, 3).unwrap();
        let br = lie_bracket(&f, &build_linear(2, 3)).unwrap();
        for (t, m, c) in p3.iter() {
            let role = term_role(&atlas, t, m).unwrap();
            let got = br.coeff(t, m);
            match role {
                TermRole::Removed(_) => assert!((got + c).norm() < 1e-15),
                _ => assert_eq!(got, Complex64::new(0.0, 0.0)),
            }
        }
    }

    #[test]
    fn small_pipeline() {
        let nf = normal_form_pipeline(1, &pm(), 3).unwrap();
        let r = &nf.report;
        assert!(r.residual_nonresonant < 1e-12);
        assert_eq!(r.mismatches, 0, "{:?}", r.missing);
        assert!(r.pass);
        let self_action = r
            .resonant_table
            .iter()
            .find(|e| e.family == Family::SelfAction && e.target == "q[1](1,0)")
            .unwrap();
        assert_relative_eq!(self_action.found.im, 1.0 / (4.0 * PI * PI), max_relative = 1e-12);
        let first = r.resonant_table.iter().find(|e| e.family == Family::FirstType).unwrap();
        assert_relative_eq!(first.found.im, 1.0 / (2.0 * PI * PI), max_relative = 1e-12);
        assert!(r.degree5.raw_products > 0);
        assert_eq!(r.f_stats.min_abs_divisor >= 1, true);
    }

    #[test]
    fn affine_frequencies() {
        let tang = TangentialSet::new(vec![Site::new(1, 0)]).unwrap();
        let w = tangential_frequency(&tang, 0, 0);
        assert_eq!(w.lin[&(0, 0)], Rational64::from_integer(1));
        let xi = [0.3];
        assert_relative_eq!(w.analytic(&xi, 1), 0.3 / (4.0 * PI * PI));
        // −ξ/(4π²) + ξ/(2π²)
        assert_relative_eq!(w.analytic(&xi, 1), -0.3 / (4.0 * PI * PI) + 0.3 / (2.0 * PI * PI), epsilon = 1e-16);

        let xi = [0.75, 0.75, 1.75, 1.75];
        let g1 = normal_frequency(2, 0, Site::new(3, 3));
        let g2 = normal_frequency(2, 1, Site::new(3, 3));
        let gap = (g1.analytic(&xi, 2) - g2.analytic(&xi, 2)).abs();
        assert_relative_eq!(gap, 2.0 / (2.0 * PI * PI), epsilon = 1e-15);
        assert_relative_eq!(gap, 0.10132118364233778, epsilon = 1e-12);
    }

    #[test]
    fn blocks_have_expected_shape() {
        let atlas = SiteAtlas::build(&pm(), 4).unwrap();
        let fd = frequencies(&atlas, 2);
        let xi = [0.75, 0.5, 1.75, 1.5];
        let blk = &fd.blocks[&(0, Site::new(0, 1))];
        assert_eq!(blk.dim, 2);
        assert_eq!(blk.lower_sign, -1);
        let m = blk.analytic_matrix(&xi, 2);
        assert!(m[(0, 1)] > 0.0);
        assert_eq!(m[(1, 0)], -m[(0, 1)]);
        assert_relative_eq!(m[(0, 1)], (0.75f64 * 0.5).sqrt() / (2.0 * PI * PI));
        for blk in fd.blocks.values() {
            assert_eq!(blk.dim, blk.class.block_dim().min(if blk.coupling.is_some() { 2 } else { 1 }));
            if let Some(p) = blk.class.pair() {
                if blk.dim == 2 && p.kind == ResonanceKind::First {
                    assert_eq!(blk.lower_sign, 1);
                    assert_eq!(blk.quartic, p.n.norm_sq() + p.i.norm_sq());
                }
            }
        }
    }

    #[test]
    fn nondegeneracy_values() {
        let one = verify_nondegeneracy(1);
        assert_relative_eq!(one.det, 0.025330295910584444, epsilon = 1e-15);
        let two = verify_nondegeneracy(2);
        assert_eq!(two.det_units, -3);
        assert_relative_eq!(two.det, -3.0 / (4.0 * PI * PI).powi(2), epsilon = 1e-18);
        assert_relative_eq!(two.det, -1.9254e-3, max_relative = 1e-3);
        let three = verify_nondegeneracy(3);
        assert_eq!(three.det_units, 5);
        assert_eq!(three.jacobian, vec![vec![1, 2, 2], vec![2, 1, 2], vec![2, 2, 1]]);
        for b in 1..=12 {
            let r = verify_nondegeneracy(b);
            assert_eq!(r.det_units, r.closed_form);
        }
    }

    #[test]
    fn bareiss_matches_known() {
        assert_eq!(bareiss_det(vec![vec![0, 1], vec![1, 0]]), -1);
        assert_eq!(bareiss_det(vec![vec![2, 0, 1], vec![1, 3, 2], vec![1, 1, 2]]), 6);
        assert_eq!(bareiss_det(vec![vec![1, 2], vec![2, 4]]), 0);
    }
}
