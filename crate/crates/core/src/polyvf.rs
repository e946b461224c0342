//! Sparse polynomial vector fields over the mode variables `q^±_{h,n}`.
//!
//! A field is a finite sum of monomial terms `c · q^α q̄^β ∂/∂q^ϱ_{h,m}` stored
//! in canonical form: exponent maps are sorted multisets and no two terms
//! share a `(target, exponents)` key. Component indices `h` are zero-based.
//!
//! Fields produced by the normal-form pipeline carry an implicit power of the
//! small parameter: a term of degree `2k + 1` is understood to be multiplied by
//! `ε^k`, so the cubic perturbation and the homological field are stored per
//! unit `ε`.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use smallvec::SmallVec;
use thiserror::Error;

use crate::lattice::{sites_in_disk, Site};

/// Coefficients below this magnitude are treated as structural zeros after
/// cancellation.
pub const PRUNE_TOL: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Sign {
    /// `q̄` (or `z̄`).
    Minus,
    /// `q` (or `z`).
    Plus,
}

impl Sign {
    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    pub fn as_i64(self) -> i64 {
        match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }
}

/// The variable `q^ϱ_{h,n}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ModeVar {
    pub h: usize,
    pub n: Site,
    pub sign: Sign,
}

impl ModeVar {
    pub fn q(h: usize, n: Site) -> Self {
        ModeVar { h, n, sign: Sign::Plus }
    }

    pub fn qbar(h: usize, n: Site) -> Self {
        ModeVar { h, n, sign: Sign::Minus }
    }

    pub fn conj(self) -> Self {
        ModeVar { sign: self.sign.flip(), ..self }
    }
}

impl fmt::Display for ModeVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = if self.sign == Sign::Plus { "q" } else { "qbar" };
        write!(f, "{s}[{}]{}", self.h + 1, self.n)
    }
}

/// Canonical multiset of variables with positive exponents.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial(SmallVec<[(ModeVar, u32); 3]>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(SmallVec::new())
    }

    pub fn from_vars<I: IntoIterator<Item = ModeVar>>(vars: I) -> Self {
        let mut m = Monomial::one();
        for v in vars {
            m.mul_var(v, 1);
        }
        m
    }

    pub fn from_powers<I: IntoIterator<Item = (ModeVar, u32)>>(powers: I) -> Self {
        let mut m = Monomial::one();
        for (v, e) in powers {
            m.mul_var(v, e);
        }
        m
    }

    fn mul_var(&mut self, v: ModeVar, e: u32) {
        if e == 0 {
            return;
        }
        match self.0.binary_search_by(|(w, _)| w.cmp(&v)) {
            Ok(pos) => self.0[pos].1 += e,
            Err(pos) => self.0.insert(pos, (v, e)),
        }
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|(_, e)| *e).sum()
    }

    pub fn powers(&self) -> &[(ModeVar, u32)] {
        &self.0
    }

    pub fn exponent(&self, v: ModeVar) -> u32 {
        self.0
            .binary_search_by(|(w, _)| w.cmp(&v))
            .map(|p| self.0[p].1)
            .unwrap_or(0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut out = self.clone();
        for &(v, e) in other.powers() {
            out.mul_var(v, e);
        }
        out
    }

    /// `∂/∂v` of the monomial: `(exponent, monomial / v)`.
    pub fn derive(&self, v: ModeVar) -> Option<(u32, Monomial)> {
        let pos = self.0.binary_search_by(|(w, _)| w.cmp(&v)).ok()?;
        let e = self.0[pos].1;
        let mut rest = self.clone();
        if e == 1 {
            rest.0.remove(pos);
        } else {
            rest.0[pos].1 -= 1;
        }
        Some((e, rest))
    }

    /// Image under `S`: every `q ↔ q̄`.
    pub fn swapped(&self) -> Monomial {
        Monomial::from_powers(self.0.iter().map(|&(v, e)| (v.conj(), e)))
    }

    pub fn eval(&self, value: impl Fn(ModeVar) -> Complex64) -> Complex64 {
        let mut acc = Complex64::new(1.0, 0.0);
        for &(v, e) in &self.0 {
            acc *= value(v).powu(e);
        }
        acc
    }

    pub fn vars(&self) -> impl Iterator<Item = ModeVar> + '_ {
        self.0.iter().map(|(v, _)| *v)
    }

    /// Variables with multiplicity.
    pub fn slots(&self) -> impl Iterator<Item = ModeVar> + '_ {
        self.0
            .iter()
            .flat_map(|&(v, e)| std::iter::repeat_n(v, e as usize))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|(v, e)| if *e == 1 { v.to_string() } else { format!("{v}^{e}") })
            .collect();
        write!(f, "{}", parts.join("*"))
    }
}

/// One term of a field, in owned form.
#[derive(Clone, Debug, PartialEq)]
pub struct MonomialTerm {
    pub target: ModeVar,
    pub coeff: Complex64,
    pub exponents: Monomial,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("fields are incompatible: d = {0} vs {1}")]
    Incompatible(usize, usize),
    #[error("term references {var}, outside truncation radius {radius}")]
    TruncationOverflow { var: ModeVar, radius: i64 },
    #[error("no lattice step with |t| > {k} fits inside radius {radius}")]
    TruncationTooSmall { k: i64, radius: i64 },
}

/// What to do with a produced term that leaves the truncation disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overflow {
    Error,
    Drop,
}

/// Sparse polynomial vector field on `d` components truncated to `|n| ≤ radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyVectorField {
    d: usize,
    radius: i64,
    terms: BTreeMap<(ModeVar, Monomial), Complex64>,
    pruned: usize,
    overflowed: usize,
}

impl PolyVectorField {
    pub fn new(d: usize, radius: i64) -> Self {
        PolyVectorField {
            d,
            radius,
            terms: BTreeMap::new(),
            pruned: 0,
            overflowed: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Number of terms removed as numerical zeros so far.
    pub fn pruned(&self) -> usize {
        self.pruned
    }

    /// Number of out-of-disk terms dropped under [`Overflow::Drop`].
    pub fn overflowed(&self) -> usize {
        self.overflowed
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModeVar, &Monomial, Complex64)> + '_ {
        self.terms.iter().map(|((t, m), c)| (*t, m, *c))
    }

    pub fn to_terms(&self) -> Vec<MonomialTerm> {
        self.iter()
            .map(|(target, m, coeff)| MonomialTerm {
                target,
                coeff,
                exponents: m.clone(),
            })
            .collect()
    }

    pub fn coeff(&self, target: ModeVar, mono: &Monomial) -> Complex64 {
        // Keys are small; cloning keeps the map keyed by owned values.
        self.terms
            .get(&(target, mono.clone()))
            .copied()
            .unwrap_or_default()
    }

    /// Adds `coeff` to the `(target, mono)` entry, merging with any existing term.
    pub fn add_term(&mut self, target: ModeVar, mono: Monomial, coeff: Complex64) {
        if coeff == Complex64::new(0.0, 0.0) {
            return;
        }
        *self.terms.entry((target, mono)).or_default() += coeff;
    }

    /// Removes terms with `|c| < tol`; returns how many were removed.
    pub fn prune(&mut self, tol: f64) -> usize {
        let before = self.terms.len();
        self.terms.retain(|_, c| c.norm() >= tol);
        let removed = before - self.terms.len();
        self.pruned += removed;
        removed
    }

    fn fits(&self, v: ModeVar) -> bool {
        v.h < self.d && v.n.within(self.radius)
    }

    /// First variable (target or exponent) outside the truncation.
    pub fn out_of_range(&self) -> Option<ModeVar> {
        self.terms.keys().find_map(|(t, m)| {
            std::iter::once(*t)
                .chain(m.vars())
                .find(|v| !self.fits(*v))
        })
    }

    pub fn scaled(&self, k: Complex64) -> PolyVectorField {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= k;
        }
        out
    }

    pub fn add(&self, other: &PolyVectorField) -> Result<PolyVectorField, PolyError> {
        self.compatible(other)?;
        let mut out = self.clone();
        out.radius = self.radius.max(other.radius);
        for (k, c) in &other.terms {
            *out.terms.entry(k.clone()).or_default() += *c;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &PolyVectorField) -> Result<PolyVectorField, PolyError> {
        self.add(&other.scaled(Complex64::new(-1.0, 0.0)))
    }

    /// Terms of total degree `k`.
    pub fn degree_part(&self, k: u32) -> PolyVectorField {
        let mut out = PolyVectorField::new(self.d, self.radius);
        for ((t, m), c) in &self.terms {
            if m.degree() == k {
                out.terms.insert((*t, m.clone()), *c);
            }
        }
        out
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    fn compatible(&self, other: &PolyVectorField) -> Result<(), PolyError> {
        if self.d != other.d {
            return Err(PolyError::Incompatible(self.d, other.d));
        }
        Ok(())
    }

    fn by_target(&self) -> HashMap<ModeVar, Vec<(&Monomial, Complex64)>> {
        let mut idx: HashMap<ModeVar, Vec<(&Monomial, Complex64)>> = HashMap::new();
        for ((t, m), c) in &self.terms {
            idx.entry(*t).or_default().push((m, *c));
        }
        idx
    }

    /// Visits every product `coeff · monomial ∂/∂target` of the derivation
    /// `X(Y^v)`: `Y`'s components differentiated along `X`.
    fn for_each_derivation_product(
        x: &PolyVectorField,
        y: &PolyVectorField,
        mut f: impl FnMut(ModeVar, Monomial, Complex64),
    ) {
        let x_idx = x.by_target();
        for ((target, mono), c) in &y.terms {
            for &(w, _) in mono.powers() {
                let Some(xw) = x_idx.get(&w) else { continue };
                let (e, rest) = mono.derive(w).expect("variable present");
                let scale = *c * e as f64;
                for (xm, xc) in xw {
                    f(*target, rest.mul(xm), scale * *xc);
                }
            }
        }
    }

    /// The `∂/∂q^ϱ_{h,n}` component evaluated at a point.
    pub fn component(&self, target: ModeVar, value: impl Fn(ModeVar) -> Complex64 + Copy) -> Complex64 {
        self.terms
            .range((target, Monomial::one())..)
            .take_while(|((t, _), _)| *t == target)
            .map(|((_, m), c)| *c * m.eval(value))
            .sum()
    }

    /// Evaluates every component at the point given by `value`.
    pub fn eval(&self, value: impl Fn(ModeVar) -> Complex64 + Copy) -> BTreeMap<ModeVar, Complex64> {
        let mut out: BTreeMap<ModeVar, Complex64> = BTreeMap::new();
        for ((t, m), c) in &self.terms {
            *out.entry(*t).or_default() += *c * m.eval(value);
        }
        out
    }

    /// Tangent vector at a real state (`q̄ = conj q`), `q`-components only.
    pub fn apply(&self, state: &ModeState) -> ModeState {
        let value = |v: ModeVar| state.value(v);
        let mut out = ModeState::new(self.d);
        for ((t, m), c) in &self.terms {
            if t.sign == Sign::Plus {
                out.add(t.h, t.n, *c * m.eval(value));
            }
        }
        out
    }

    /// `∂ X^{(target)} / ∂ var` as a polynomial.
    pub fn jacobian_entry(&self, target: ModeVar, var: ModeVar) -> Polynomial {
        let mut p = Polynomial::new();
        for ((_, m), c) in self
            .terms
            .range((target, Monomial::one())..)
            .take_while(|((t, _), _)| *t == target)
        {
            if let Some((e, rest)) = m.derive(var) {
                p.add(rest, *c * e as f64);
            }
        }
        p
    }
}

/// Scalar polynomial in the mode variables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Polynomial {
    pub terms: BTreeMap<Monomial, Complex64>,
}

impl Polynomial {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, m: Monomial, c: Complex64) {
        *self.terms.entry(m).or_default() += c;
    }

    pub fn is_zero(&self) -> bool {
        self.terms.values().all(|c| c.norm() == 0.0)
    }

    /// `a·self + b·other`, coefficient-wise.
    pub fn combine(&self, a: f64, other: &Polynomial, b: f64) -> Polynomial {
        let mut out = Polynomial::new();
        for (m, c) in &self.terms {
            out.add(m.clone(), *c * a);
        }
        for (m, c) in &other.terms {
            out.add(m.clone(), *c * b);
        }
        out
    }

    /// Per-monomial upper bound of `sup Σ |c| |z^α|` over the ball `‖z^±_h‖_ρ < s`.
    pub fn norm_upper(&self, rho: f64, s: f64) -> f64 {
        self.terms
            .iter()
            .map(|(m, c)| c.norm() * monomial_sup(m, rho, s))
            .sum()
    }
}

/// Mode coefficients `q_{h,n}` of a real state; `q̄` is the conjugate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModeState {
    pub d: usize,
    pub coeffs: BTreeMap<(usize, Site), Complex64>,
}

impl ModeState {
    pub fn new(d: usize) -> Self {
        ModeState {
            d,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, h: usize, n: Site, v: Complex64) {
        self.coeffs.insert((h, n), v);
    }

    pub fn add(&mut self, h: usize, n: Site, v: Complex64) {
        *self.coeffs.entry((h, n)).or_default() += v;
    }

    pub fn get(&self, h: usize, n: Site) -> Complex64 {
        self.coeffs.get(&(h, n)).copied().unwrap_or_default()
    }

    pub fn value(&self, v: ModeVar) -> Complex64 {
        let q = self.get(v.h, v.n);
        match v.sign {
            Sign::Plus => q,
            Sign::Minus => q.conj(),
        }
    }

    /// Random state with `support` nonzero modes inside `|n| ≤ radius`.
    pub fn random_sparse(d: usize, radius: i64, support: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let sites: Vec<Site> = sites_in_disk(radius).collect();
        let mut st = ModeState::new(d);
        for _ in 0..support {
            let h = rng.gen_range(0..d);
            let n = sites[rng.gen_range(0..sites.len())];
            let v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale;
            st.set(h, n, v);
        }
        st
    }
}

/// Weighted ℓ¹ norm `Σ_h Σ_n e^{|n|ρ} |z_{h,n}|`.
pub fn seq_norm(z: &ModeState, rho: f64) -> f64 {
    z.coeffs
        .iter()
        .map(|((_, n), v)| (n.norm() * rho).exp() * v.norm())
        .sum()
}

/// Sup of `|z^α|` over `‖z^ϱ_h‖_ρ ≤ s` for each group `(h, ϱ)`, by weighted
/// AM-GM inside each group.
pub fn monomial_sup(m: &Monomial, rho: f64, s: f64) -> f64 {
    let mut groups: BTreeMap<(usize, Sign), Vec<(f64, u32)>> = BTreeMap::new();
    for &(v, e) in m.powers() {
        groups
            .entry((v.h, v.sign))
            .or_default()
            .push(((v.n.norm() * rho).exp(), e));
    }
    let mut out = 1.0;
    for parts in groups.values() {
        let total: u32 = parts.iter().map(|(_, e)| *e).sum();
        let total_f = total as f64;
        for &(w, e) in parts {
            let x = e as f64 * s / (total_f * w);
            out *= x.powi(e as i32);
        }
    }
    out
}

/// Upper bound on the z-sector field norm
/// `(1/s) Σ_{ϱ,h,n} e^{|n|ρ} ‖X^{(q^ϱ_{h,n})}‖`, maximising each monomial
/// separately. Exact for single-monomial fields.
pub fn vf_norm_upper(x: &PolyVectorField, rho: f64, s: f64) -> f64 {
    x.iter()
        .map(|(t, m, c)| (t.n.norm() * rho).exp() * c.norm() * monomial_sup(m, rho, s))
        .sum::<f64>()
        / s
}

/// The same weighted sum evaluated at one point of the ball; any such value
/// is a lower bound for the norm.
pub fn vf_norm_at(x: &PolyVectorField, rho: f64, s: f64, point: impl Fn(ModeVar) -> Complex64 + Copy) -> f64 {
    x.iter()
        .map(|(t, m, c)| {
            let mag = m.eval(|v| Complex64::new(point(v).norm(), 0.0)).re;
            (t.n.norm() * rho).exp() * c.norm() * mag
        })
        .sum::<f64>()
        / s
}

/// `[X, Y]` with `[X, Y]^v = X(Y^v) − Y(X^v)`.
pub fn lie_bracket(x: &PolyVectorField, y: &PolyVectorField) -> Result<PolyVectorField, PolyError> {
    lie_bracket_with(x, y, Overflow::Error)
}

pub fn lie_bracket_with(
    x: &PolyVectorField,
    y: &PolyVectorField,
    policy: Overflow,
) -> Result<PolyVectorField, PolyError> {
    x.compatible(y)?;
    let radius = x.radius.min(y.radius);
    let mut out = PolyVectorField::new(x.d, radius);
    PolyVectorField::for_each_derivation_product(x, y, |t, m, c| out.add_term(t, m, c));
    PolyVectorField::for_each_derivation_product(y, x, |t, m, c| out.add_term(t, m, -c));
    // Produced terms only reuse input variables; anything outside the common
    // disk came from the wider input.
    let outside: Vec<_> = out
        .terms
        .keys()
        .filter(|(t, m)| !std::iter::once(*t).chain(m.vars()).all(|v| out.fits(v)))
        .cloned()
        .collect();
    if let Some((t, m)) = outside.first() {
        if policy == Overflow::Error {
            let var = std::iter::once(*t).chain(m.vars()).find(|v| !out.fits(*v)).unwrap();
            return Err(PolyError::TruncationOverflow { var, radius });
        }
    }
    for k in &outside {
        out.terms.remove(k);
    }
    out.overflowed += outside.len();
    out.prune(PRUNE_TOL);
    Ok(out)
}

/// Streaming statistics of `[X, Y]` products without merging: raw product
/// count, `Σ|c|` and `max|c|`. Used to bound discarded higher-order terms.
pub fn bracket_product_stats(x: &PolyVectorField, y: &PolyVectorField) -> (usize, f64, f64) {
    let (mut n, mut sum, mut max) = (0usize, 0.0f64, 0.0f64);
    let mut visit = |_: ModeVar, _: Monomial, c: Complex64| {
        n += 1;
        let a = c.norm();
        sum += a;
        max = max.max(a);
    };
    PolyVectorField::for_each_derivation_product(x, y, &mut visit);
    PolyVectorField::for_each_derivation_product(y, x, &mut visit);
    (n, sum, max)
}

/// `S`-reversibility `DS·X(Sy) = −X(y)` with `S(q, q̄) = (q̄, q)`, as the
/// coefficient identity `X[v*, μ*] = −X[v, μ]`.
pub fn check_reversible(x: &PolyVectorField) -> bool {
    x.terms.iter().all(|((t, m), c)| {
        let mirror = x.coeff(t.conj(), &m.swapped());
        mirror == -*c
    })
}

/// Reality: the `q̄` components are the conjugates of the `q` components.
pub fn check_real(x: &PolyVectorField) -> bool {
    x.terms.iter().all(|((t, m), c)| {
        let mirror = x.coeff(t.conj(), &m.swapped());
        mirror == c.conj()
    })
}

/// Momentum balance of one term in lattice direction `l`.
pub fn momentum_defect(target: ModeVar, mono: &Monomial, l: usize) -> i64 {
    let inflow: i64 = mono
        .powers()
        .iter()
        .map(|&(v, e)| v.sign.as_i64() * v.n.coord(l) * e as i64)
        .sum();
    inflow - target.sign.as_i64() * target.n.coord(l)
}

/// `[X, M^{(l)}_0] = 0`, checked term by term.
pub fn check_momentum(x: &PolyVectorField, l: usize) -> bool {
    x.terms.keys().all(|(t, m)| momentum_defect(*t, m, l) == 0)
}

/// `M^{(l)}_0 = Σ ϱ i (n)_l q^ϱ ∂/∂q^ϱ` on the truncation disk.
pub fn momentum_field(d: usize, radius: i64, l: usize) -> PolyVectorField {
    let mut out = PolyVectorField::new(d, radius);
    for h in 0..d {
        for n in sites_in_disk(radius) {
            let k = n.coord(l) as f64;
            if k == 0.0 {
                continue;
            }
            for v in [ModeVar::q(h, n), ModeVar::qbar(h, n)] {
                out.add_term(v, Monomial::from_vars([v]), Complex64::new(0.0, v.sign.as_i64() as f64 * k));
            }
        }
    }
    out
}

/// Linear part `Σ iλ_n q ∂_q − iλ_n q̄ ∂_q̄` with `λ_n = |n|²`.
pub fn build_linear(d: usize, radius: i64) -> PolyVectorField {
    let mut out = PolyVectorField::new(d, radius);
    for h in 0..d {
        for n in sites_in_disk(radius) {
            let lam = n.norm_sq() as f64;
            if lam == 0.0 {
                continue;
            }
            for v in [ModeVar::q(h, n), ModeVar::qbar(h, n)] {
                out.add_term(v, Monomial::from_vars([v]), Complex64::new(0.0, v.sign.as_i64() as f64 * lam));
            }
        }
    }
    out
}

/// Coupling constant of the cubic lattice field, `1/(2π)²`.
pub fn cubic_coupling() -> f64 {
    1.0 / (4.0 * PI * PI)
}

/// The cubic perturbation `P⁰`: for every component `h` and every ordered
/// `(i, j, m)` with `i + j − m − n = 0` inside the disk, `(i/(2π)²) q_i q_j q̄_m
/// ∂/∂q_n`, plus the conjugate family on `∂/∂q̄_n`. Symmetric `(i, j)`
/// contributions are merged.
pub fn build_cubic_p0(d: usize, radius: i64) -> PolyVectorField {
    let sites: Vec<Site> = sites_in_disk(radius).collect();
    let c = Complex64::new(0.0, cubic_coupling());
    let mut out = PolyVectorField::new(d, radius);
    for h in 0..d {
        for (a, &i) in sites.iter().enumerate() {
            for &j in &sites[a..] {
                let mult = if i == j { 1.0 } else { 2.0 };
                for &m in &sites {
                    let n = i + j - m;
                    if !n.within(radius) {
                        continue;
                    }
                    let mono = Monomial::from_vars([ModeVar::q(h, i), ModeVar::q(h, j), ModeVar::qbar(h, m)]);
                    let conj_mono = mono.swapped();
                    out.add_term(ModeVar::q(h, n), mono, c * mult);
                    out.add_term(ModeVar::qbar(h, n), conj_mono, c.conj() * mult);
                }
            }
        }
    }
    out
}

/// Integer divisor `Σ ϱ_w λ_w − ϱ_target λ_target` of a monomial term against
/// the linear part, i.e. `[Λ, c μ ∂_v] = i·divisor·c μ ∂_v`.
pub fn divisor(target: ModeVar, mono: &Monomial) -> i64 {
    let inflow: i64 = mono
        .powers()
        .iter()
        .map(|&(v, e)| v.sign.as_i64() * v.n.norm_sq() * e as i64)
        .sum();
    inflow - target.sign.as_i64() * target.n.norm_sq()
}

#[derive(Clone, Debug, Serialize)]
pub struct TlConfig {
    /// Lattice direction `c ≠ 0`.
    pub direction: Site,
    /// Threshold `K` beyond which the Lipschitz rate is checked.
    pub k: i64,
    pub rho: f64,
    pub s: f64,
    /// Number of sampled `(n, m, σ, ±, h, h')` entries.
    pub budget: usize,
    /// Base sites `n, m` are drawn from `|·| ≤ window`.
    pub window: i64,
    pub seed: u64,
    /// `ε₀`; when `None` the field norm bound is used.
    pub eps0: Option<f64>,
}

impl Default for TlConfig {
    fn default() -> Self {
        TlConfig {
            direction: Site::new(1, 0),
            k: 2,
            rho: 0.1,
            s: 0.5,
            budget: 64,
            window: 2,
            seed: 7,
            eps0: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TlSample {
    pub h: usize,
    pub h_prime: usize,
    pub sigma: Sign,
    /// `+`: derivative along `z^σ_{m+tc}`; `−`: along `z^{−σ}_{m−tc}`.
    pub pm: Sign,
    pub n: Site,
    pub m: Site,
    pub t_values: Vec<i64>,
    /// Entry norms along `t`.
    pub entry_norms: Vec<f64>,
    pub limit_norm: f64,
    /// `ε₀ e^{−|n∓m|ρ}`.
    pub decay_bound: f64,
    /// `max_{t > K} ‖D_t − lim‖`.
    pub max_defect: f64,
    /// `max_{t > K} |t| ‖D_t − lim‖ / (ε₀ e^{−|n∓m|ρ})`; the rate holds iff ≤ 1.
    pub lipschitz_ratio: f64,
    pub stabilized_exactly: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TlReport {
    pub eps0: f64,
    pub samples: Vec<TlSample>,
    pub limits_exist: bool,
    pub decay_ok: bool,
    pub lipschitz_ok: bool,
    /// Largest `‖D_t − lim‖` seen for `t > K` over all samples.
    pub max_lipschitz_defect: f64,
    /// Least-squares slope of `log defect` against `log t` over nonzero defects;
    /// `None` when every defect vanishes.
    pub defect_decay_exponent: Option<f64>,
    /// The θ/I-sector limits are vacuous here: fields carry no angle or action
    /// components.
    pub angle_action_sector: &'static str,
}

/// Samples Jacobian entries `∂X^{(z^σ_{h,n+tc})}/∂z^{±σ}_{h',m±tc}` along `t`,
/// estimates their limits and checks the decay and `1/|t|` Lipschitz rate.
pub fn toeplitz_lipschitz_check(x: &PolyVectorField, cfg: &TlConfig) -> Result<TlReport, PolyError> {
    let c = cfg.direction;
    assert!(c != Site::ORIGIN, "direction must be nonzero");
    let radius = x.radius();
    let eps0 = cfg.eps0.unwrap_or_else(|| vf_norm_upper(x, cfg.rho, cfg.s));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Vec<Site> = sites_in_disk(cfg.window).collect();
    let mut samples = Vec::new();
    let mut log_pts: Vec<(f64, f64)> = Vec::new();
    for _ in 0..cfg.budget {
        let h = rng.gen_range(0..x.d());
        let h_prime = rng.gen_range(0..x.d());
        let sigma = if rng.gen_bool(0.5) { Sign::Plus } else { Sign::Minus };
        let pm = if rng.gen_bool(0.5) { Sign::Plus } else { Sign::Minus };
        let n = base[rng.gen_range(0..base.len())];
        let m = base[rng.gen_range(0..base.len())];

        let entry = |t: i64| -> Option<Polynomial> {
            let tn = n + c.scale(t);
            let (wrt_site, wrt_sign) = match pm {
                Sign::Plus => (m + c.scale(t), sigma),
                Sign::Minus => (m - c.scale(t), sigma.flip()),
            };
            if !tn.within(radius) || !wrt_site.within(radius) {
                return None;
            }
            let target = ModeVar { h, n: tn, sign: sigma };
            let wrt = ModeVar { h: h_prime, n: wrt_site, sign: wrt_sign };
            Some(x.jacobian_entry(target, wrt))
        };
        let mut ts = Vec::new();
        let mut entries = Vec::new();
        for t in 0..=(2 * radius + 2 * cfg.window + 2) {
            if let Some(p) = entry(t) {
                ts.push(t);
                entries.push(p);
            }
        }
        if ts.iter().all(|&t| t <= cfg.k) || ts.len() < 2 {
            continue;
        }
        let last = entries.len() - 1;
        let (t1, t2) = (ts[last - 1] as f64, ts[last] as f64);
        // Limit from the model D_t ≈ L + B/t through the two outermost steps.
        let limit = entries[last].combine(t2 / (t2 - t1), &entries[last - 1], -t1 / (t2 - t1));
        let sep = match pm {
            Sign::Plus => n - m,
            Sign::Minus => n + m,
        };
        let decay_bound = eps0 * (-sep.norm() * cfg.rho).exp();
        let limit_norm = limit.norm_upper(cfg.rho, cfg.s);
        let mut max_defect = 0.0f64;
        let mut ratio = 0.0f64;
        let mut exact = true;
        for (t, p) in ts.iter().zip(&entries) {
            if *t <= cfg.k {
                continue;
            }
            let diff = p.combine(1.0, &limit, -1.0);
            let defect = diff.norm_upper(cfg.rho, cfg.s);
            if defect > 0.0 {
                exact = false;
                if *t < ts[last - 1] {
                    log_pts.push(((*t as f64).ln(), defect.ln()));
                }
            }
            max_defect = max_defect.max(defect);
            ratio = ratio.max(*t as f64 * defect / decay_bound);
        }
        samples.push(TlSample {
            h,
            h_prime,
            sigma,
            pm,
            n,
            m,
            entry_norms: entries.iter().map(|p| p.norm_upper(cfg.rho, cfg.s)).collect(),
            t_values: ts,
            limit_norm,
            decay_bound,
            max_defect,
            lipschitz_ratio: ratio,
            stabilized_exactly: exact,
        });
    }
    if samples.is_empty() {
        return Err(PolyError::TruncationTooSmall { k: cfg.k, radius });
    }
    let defect_decay_exponent = if log_pts.len() >= 2 {
        let (sx, sy) = log_pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
        let k = log_pts.len() as f64;
        let (mx, my) = (sx / k, sy / k);
        let (num, den) = log_pts
            .iter()
            .fold((0.0, 0.0), |(a, b), p| (a + (p.0 - mx) * (p.1 - my), b + (p.0 - mx).powi(2)));
        (den > 0.0).then(|| num / den)
    } else {
        None
    };
    let limits_exist = samples.iter().all(|s| s.limit_norm.is_finite());
    let decay_ok = samples.iter().all(|s| s.limit_norm <= s.decay_bound);
    let lipschitz_ok = samples.iter().all(|s| s.lipschitz_ratio <= 1.0);
    let max_lipschitz_defect = samples.iter().map(|s| s.max_defect).fold(0.0, f64::max);
    Ok(TlReport {
        eps0,
        samples,
        limits_exist,
        decay_ok,
        lipschitz_ok,
        max_lipschitz_defect,
        defect_decay_exponent,
        angle_action_sector: "not represented; limits (tl0)/(tl3) are vacuous",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn p0_single_mode_coefficient() {
        let p0 = build_cubic_p0(1, 1);
        let o = Site::ORIGIN;
        let mono = Monomial::from_powers([(ModeVar::q(0, o), 2), (ModeVar::qbar(0, o), 1)]);
        assert_relative_eq!(p0.coeff(ModeVar::q(0, o), &mono).im, cubic_coupling(), epsilon = 1e-18);
        assert_eq!(p0.coeff(ModeVar::q(0, o), &mono).re, 0.0);
        // conjugate family
        let cm = mono.swapped();
        assert_eq!(p0.coeff(ModeVar::qbar(0, o), &cm), p0.coeff(ModeVar::q(0, o), &mono).conj());
        // momentum-violating monomial is absent
        let bad = Monomial::from_vars([ModeVar::q(0, Site::new(1, 0)), ModeVar::q(0, o), ModeVar::qbar(0, o)]);
        assert_eq!(p0.coeff(ModeVar::q(0, o), &bad), c(0.0, 0.0));
    }

    #[test]
    fn p0_merges_symmetric_contributions() {
        let p0 = build_cubic_p0(1, 1);
        let (a, b) = (Site::new(1, 0), Site::new(-1, 0));
        let mono = Monomial::from_vars([ModeVar::q(0, a), ModeVar::q(0, b), ModeVar::qbar(0, b)]);
        assert_relative_eq!(p0.coeff(ModeVar::q(0, a), &mono).im, 2.0 * cubic_coupling());
    }

    #[test]
    fn bracket_hand_example() {
        let (a, b) = (ModeVar::q(0, Site::new(0, 0)), ModeVar::q(0, Site::new(1, 0)));
        let mut x = PolyVectorField::new(1, 2);
        x.add_term(a, Monomial::from_vars([a]), c(1.0, 0.0));
        let mut y = PolyVectorField::new(1, 2);
        y.add_term(b, Monomial::from_powers([(a, 2)]), c(1.0, 0.0));
        let br = lie_bracket(&x, &y).unwrap();
        assert_eq!(br.len(), 1);
        assert_eq!(br.coeff(b, &Monomial::from_powers([(a, 2)])), c(2.0, 0.0));
        assert!(lie_bracket(&x, &x).unwrap().is_empty());
    }

    #[test]
    fn bracket_with_linear_part_is_divisor_scaling() {
        let lin = build_linear(1, 3);
        let mut y = PolyVectorField::new(1, 3);
        let (i, j, n) = (Site::new(1, 0), Site::new(-1, 0), Site::new(0, 1));
        let target = ModeVar::q(0, Site::new(2, 1));
        let mono = Monomial::from_vars([ModeVar::q(0, i), ModeVar::qbar(0, j), ModeVar::q(0, n)]);
        y.add_term(target, mono.clone(), c(0.3, -0.7));
        let br = lie_bracket(&lin, &y).unwrap();
        let delta = divisor(target, &mono);
        assert_eq!(delta, 1 - 1 + 1 - 5);
        let expect = c(0.0, delta as f64) * c(0.3, -0.7);
        let got = br.coeff(target, &mono);
        assert_relative_eq!(got.re, expect.re, epsilon = 1e-14);
        assert_relative_eq!(got.im, expect.im, epsilon = 1e-14);
    }

    #[test]
    fn overflow_policy() {
        let far = ModeVar::q(0, Site::new(3, 0));
        let near = ModeVar::q(0, Site::new(1, 0));
        let mut x = PolyVectorField::new(1, 3);
        x.add_term(near, Monomial::from_vars([far]), c(1.0, 0.0));
        let mut y = PolyVectorField::new(1, 1);
        y.add_term(far, Monomial::from_vars([near]), c(1.0, 0.0));
        assert!(matches!(lie_bracket(&x, &y), Err(PolyError::TruncationOverflow { .. })));
        let dropped = lie_bracket_with(&x, &y, Overflow::Drop).unwrap();
        assert!(dropped.overflowed() > 0);
        assert!(dropped.out_of_range().is_none());
    }

    #[test]
    fn reversibility_and_momentum() {
        let p0 = build_cubic_p0(2, 2);
        let lin = build_linear(2, 2);
        let full = p0.add(&lin).unwrap();
        assert!(check_reversible(&full));
        assert!(check_real(&full));
        assert!(check_reversible(&full.scaled(c(-3.5, 0.0))));
        for l in [1, 2] {
            assert!(check_momentum(&p0, l));
            assert!(lie_bracket(&p0, &momentum_field(2, 2, l)).unwrap().is_empty());
        }
        let mut lone = PolyVectorField::new(1, 1);
        let q = ModeVar::q(0, Site::ORIGIN);
        lone.add_term(q, Monomial::from_vars([q]), c(1.0, 0.0));
        assert!(!check_reversible(&lone));

        let mut shift = PolyVectorField::new(1, 1);
        shift.add_term(q, Monomial::from_vars([ModeVar::q(0, Site::new(1, 0))]), c(1.0, 0.0));
        assert!(!check_momentum(&shift, 1));
        assert!(check_momentum(&shift, 2));
    }

    #[test]
    fn norms() {
        let mut z = ModeState::new(1);
        z.set(0, Site::ORIGIN, c(1.0, 0.0));
        assert_eq!(seq_norm(&z, 0.7), 1.0);
        let mut z = ModeState::new(1);
        z.set(0, Site::new(1, 0), c(2.0, 0.0));
        assert_relative_eq!(seq_norm(&z, 0.5), 2.0 * 0.5f64.exp(), epsilon = 1e-15);
        assert_relative_eq!(seq_norm(&z, 0.5), 3.2974425414002564, epsilon = 1e-12);

        let (n, m) = (Site::new(1, 1), Site::new(2, 0));
        let mut x = PolyVectorField::new(1, 2);
        x.add_term(ModeVar::q(0, m), Monomial::from_vars([ModeVar::q(0, n)]), c(0.0, 1.5));
        for s in [0.1, 1.0, 3.0] {
            let expect = 1.5 * ((m.norm() - n.norm()) * 0.3).exp();
            assert_relative_eq!(vf_norm_upper(&x, 0.3, s), expect, epsilon = 1e-12);
        }
        assert_eq!(vf_norm_upper(&PolyVectorField::new(1, 1), 0.3, 1.0), 0.0);
    }

    #[test]
    fn apply_single_mode() {
        let p0 = build_cubic_p0(1, 2);
        let a = c(0.3, -0.2);
        let mut st = ModeState::new(1);
        st.set(0, Site::ORIGIN, a);
        let out = p0.apply(&st);
        let expect = c(0.0, cubic_coupling()) * a.norm_sqr() * a;
        let got = out.get(0, Site::ORIGIN);
        assert_relative_eq!(got.re, expect.re, epsilon = 1e-16);
        assert_relative_eq!(got.im, expect.im, epsilon = 1e-16);
        assert!(out.coeffs.iter().all(|(k, v)| k.1 == Site::ORIGIN || v.norm() == 0.0));
        assert!(p0.apply(&ModeState::new(1)).coeffs.values().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn tl_check_on_p0_and_synthetic_field() {
        let p0 = build_cubic_p0(2, 6);
        let cfg = TlConfig { budget: 40, ..TlConfig::default() };
        let rep = toeplitz_lipschitz_check(&p0, &cfg).unwrap();
        assert!(rep.limits_exist);
        assert_eq!(rep.max_lipschitz_defect, 0.0);
        assert!(rep.lipschitz_ok);
        assert!(rep.samples.iter().all(|s| s.stabilized_exactly));
        for s in rep.samples.iter().filter(|s| s.h != s.h_prime) {
            assert_eq!(s.limit_norm, 0.0);
            assert!(s.entry_norms.iter().all(|v| *v == 0.0));
        }

        // X^{(q_n)} = (1 + 1/|n|) q_n |q_0|²: the diagonal entry decays like 1/t.
        let radius = 30;
        let mut x = PolyVectorField::new(1, radius);
        let o = Site::ORIGIN;
        for n in sites_in_disk(radius) {
            if n == o {
                continue;
            }
            let k = 1.0 + 1.0 / n.norm();
            let mono = Monomial::from_vars([ModeVar::q(0, n), ModeVar::q(0, o), ModeVar::qbar(0, o)]);
            x.add_term(ModeVar::q(0, n), mono.clone(), c(0.0, k));
            x.add_term(ModeVar::qbar(0, n), mono.swapped(), c(0.0, -k));
        }
        let cfg = TlConfig {
            budget: 200,
            window: 1,
            k: 3,
            ..TlConfig::default()
        };
        let rep = toeplitz_lipschitz_check(&x, &cfg).unwrap();
        assert!(rep.max_lipschitz_defect > 0.0);
        let slope = rep.defect_decay_exponent.expect("nonzero defects");
        assert!((slope + 1.0).abs() < 0.35, "slope {slope}");
    }

    #[test]
    fn tl_check_reports_small_truncation() {
        let p0 = build_cubic_p0(1, 2);
        let cfg = TlConfig { k: 10, ..TlConfig::default() };
        assert!(matches!(
            toeplitz_lipschitz_check(&p0, &cfg),
            Err(PolyError::TruncationTooSmall { .. })
        ));
    }
}
