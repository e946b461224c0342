//! Integer-lattice bookkeeping for the Fourier sites of the torus.
//!
//! Sites `n ∈ Z²` are split into the tangential set `I`, the first-type
//! resonant sites `L₁` (rectangles `i − j + n − m = 0` with equal `|·|²`
//! balance), the second-type resonant sites `L₂` (`n + m = i + j` on a lattice
//! circle) and the generic remainder. Everything here is exact integer
//! arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point of the Fourier lattice `Z²`. Ordering is lexicographic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub n1: i64,
    pub n2: i64,
}

impl Site {
    pub const ORIGIN: Site = Site { n1: 0, n2: 0 };

    pub const fn new(n1: i64, n2: i64) -> Self {
        Site { n1, n2 }
    }

    /// `|n|²`, which is also the Laplace eigenvalue `λ_n`.
    #[inline]
    pub fn norm_sq(self) -> i64 {
        self.n1 * self.n1 + self.n2 * self.n2
    }

    #[inline]
    pub fn norm(self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    #[inline]
    pub fn dot(self, other: Site) -> i64 {
        self.n1 * other.n1 + self.n2 * other.n2
    }

    /// Coordinate `l ∈ {1, 2}`.
    #[inline]
    pub fn coord(self, l: usize) -> i64 {
        match l {
            1 => self.n1,
            2 => self.n2,
            _ => panic!("lattice coordinate index must be 1 or 2, got {l}"),
        }
    }

    #[inline]
    pub fn within(self, radius: i64) -> bool {
        self.norm_sq() <= radius * radius
    }

    pub fn scale(self, t: i64) -> Site {
        Site::new(self.n1 * t, self.n2 * t)
    }
}

impl Add for Site {
    type Output = Site;
    fn add(self, o: Site) -> Site {
        Site::new(self.n1 + o.n1, self.n2 + o.n2)
    }
}

impl Sub for Site {
    type Output = Site;
    fn sub(self, o: Site) -> Site {
        Site::new(self.n1 - o.n1, self.n2 - o.n2)
    }
}

impl Neg for Site {
    type Output = Site;
    fn neg(self) -> Site {
        Site::new(-self.n1, -self.n2)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.n1, self.n2)
    }
}

impl From<(i64, i64)> for Site {
    fn from((n1, n2): (i64, i64)) -> Self {
        Site::new(n1, n2)
    }
}

/// All sites with `|n| ≤ radius`, in lexicographic order.
pub fn sites_in_disk(radius: i64) -> impl Iterator<Item = Site> {
    let r = radius.max(0);
    (-r..=r).flat_map(move |a| {
        (-r..=r)
            .map(move |b| Site::new(a, b))
            .filter(move |s| s.within(r))
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatticeError {
    #[error("tangential set must contain at least one site")]
    EmptySet,
    #[error("tangential site {0} listed twice")]
    DuplicateSite(Site),
    #[error("site {site} lies outside the truncation radius {radius}")]
    OutsideRadius { site: Site, radius: i64 },
    #[error("site {site} is ambiguous: {} resonance triplets ({})", triplets.len(), describe(triplets))]
    AmbiguousResonance {
        site: Site,
        triplets: Vec<ResonantPair>,
    },
}

fn describe(pairs: &[ResonantPair]) -> String {
    pairs.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; ")
}

/// Ordered list of distinct tangential sites `i⁽¹⁾, …, i⁽ᵇ⁾`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Site>", into = "Vec<Site>")]
pub struct TangentialSet {
    sites: Vec<Site>,
}

impl TangentialSet {
    pub fn new(sites: Vec<Site>) -> Result<Self, LatticeError> {
        if sites.is_empty() {
            return Err(LatticeError::EmptySet);
        }
        let mut seen = BTreeSet::new();
        for s in &sites {
            if !seen.insert(*s) {
                return Err(LatticeError::DuplicateSite(*s));
            }
        }
        Ok(TangentialSet { sites })
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// `b`, the number of tangential sites.
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains(&self, n: Site) -> bool {
        self.sites.contains(&n)
    }

    pub fn index_of(&self, n: Site) -> Option<usize> {
        self.sites.iter().position(|s| *s == n)
    }

    pub fn max_norm_sq(&self) -> i64 {
        self.sites.iter().map(|s| s.norm_sq()).max().unwrap_or(0)
    }

    /// `max_{i,j ∈ I} |i − j|`, rounded up.
    pub fn diameter(&self) -> i64 {
        let mut best = 0;
        for &a in &self.sites {
            for &b in &self.sites {
                best = best.max((a - b).norm_sq());
            }
        }
        isqrt_ceil(best)
    }
}

impl TryFrom<Vec<Site>> for TangentialSet {
    type Error = LatticeError;
    fn try_from(v: Vec<Site>) -> Result<Self, Self::Error> {
        TangentialSet::new(v)
    }
}

impl From<TangentialSet> for Vec<Site> {
    fn from(t: TangentialSet) -> Self {
        t.sites
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResonanceKind {
    First,
    Second,
}

/// A resonant normal pair `(n, m)` with its tangential triplet data `(i, j)`.
///
/// First type: `i − j + n − m = 0`, `|i|² − |j|² + |n|² − |m|² = 0`.
/// Second type: `n + m = i + j`, `|n|² + |m|² = |i|² + |j|²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResonantPair {
    pub kind: ResonanceKind,
    pub n: Site,
    pub m: Site,
    pub i: Site,
    pub j: Site,
}

impl ResonantPair {
    /// The same resonance seen from `m`.
    pub fn mirrored(&self) -> ResonantPair {
        match self.kind {
            ResonanceKind::First => ResonantPair {
                kind: ResonanceKind::First,
                n: self.m,
                m: self.n,
                i: self.j,
                j: self.i,
            },
            ResonanceKind::Second => ResonantPair {
                kind: ResonanceKind::Second,
                n: self.m,
                m: self.n,
                i: self.i,
                j: self.j,
            },
        }
    }

    /// Orientation with `n < m` (and `i ≤ j` for the second type).
    pub fn canonical(&self) -> ResonantPair {
        let mut p = if self.n <= self.m { *self } else { self.mirrored() };
        if p.kind == ResonanceKind::Second && p.i > p.j {
            std::mem::swap(&mut p.i, &mut p.j);
        }
        p
    }

    /// Checks the two defining equations exactly.
    pub fn satisfies_equations(&self) -> bool {
        let (n, m, i, j) = (self.n, self.m, self.i, self.j);
        match self.kind {
            ResonanceKind::First => {
                i - j + n - m == Site::ORIGIN
                    && i.norm_sq() - j.norm_sq() + n.norm_sq() - m.norm_sq() == 0
            }
            ResonanceKind::Second => {
                n + m == i + j && n.norm_sq() + m.norm_sq() == i.norm_sq() + j.norm_sq()
            }
        }
    }
}

impl fmt::Display for ResonantPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            ResonanceKind::First => "L1",
            ResonanceKind::Second => "L2",
        };
        write!(f, "{k}[n={} m={} i={} j={}]", self.n, self.m, self.i, self.j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", content = "pair")]
pub enum SiteClass {
    Tangential,
    FirstType(ResonantPair),
    SecondType(ResonantPair),
    Generic,
}

impl SiteClass {
    /// Size `φ(n)` of the normal-frequency block the site belongs to.
    pub fn block_dim(&self) -> usize {
        match self {
            SiteClass::FirstType(_) | SiteClass::SecondType(_) => 2,
            _ => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SiteClass::Tangential => "tangential",
            SiteClass::FirstType(_) => "first",
            SiteClass::SecondType(_) => "second",
            SiteClass::Generic => "generic",
        }
    }

    pub fn pair(&self) -> Option<&ResonantPair> {
        match self {
            SiteClass::FirstType(p) | SiteClass::SecondType(p) => Some(p),
            _ => None,
        }
    }
}

/// `⌊√v⌋`, `None` for negative `v`.
fn isqrt(v: i64) -> Option<i64> {
    if v < 0 {
        return None;
    }
    let mut r = (v as f64).sqrt() as i64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    Some(r)
}

fn isqrt_ceil(v: i64) -> i64 {
    let r = isqrt(v).unwrap_or(0);
    if r * r == v {
        r
    } else {
        r + 1
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// All second-type pairs. The set is finite: `2n − (i + j)` lies on the
/// circle of squared radius `|i − j|²`, so no cutoff is needed.
pub fn enumerate_second_type(tangential: &TangentialSet) -> Vec<ResonantPair> {
    let sites = tangential.sites();
    let mut out = BTreeSet::new();
    for (a, &i) in sites.iter().enumerate() {
        for &j in &sites[a..] {
            let s = i + j;
            let r2 = (i - j).norm_sq();
            let r = isqrt(r2).unwrap_or(0);
            for u1 in -r..=r {
                let rest = r2 - u1 * u1;
                let Some(u2) = isqrt(rest).filter(|u| u * u == rest) else { continue };
                for u2 in [u2, -u2] {
                    let (x, y) = (s.n1 + u1, s.n2 + u2);
                    if x.rem_euclid(2) != 0 || y.rem_euclid(2) != 0 {
                        continue;
                    }
                    let n = Site::new(x / 2, y / 2);
                    let m = s - n;
                    if tangential.contains(n) || tangential.contains(m) {
                        continue;
                    }
                    let pair = ResonantPair {
                        kind: ResonanceKind::Second,
                        n,
                        m,
                        i,
                        j,
                    };
                    debug_assert!(pair.satisfies_equations());
                    out.insert(pair.canonical());
                }
            }
        }
    }
    out.into_iter().collect()
}

/// All first-type pairs with `max(|n|, |m|) ≤ radius`, one entry per
/// resonance (orientation `n < m`).
///
/// For an ordered pair `i ≠ j` the solutions are the lattice points `n` with
/// `⟨n − j, i − j⟩ = 0`: the line through `j` perpendicular to `i − j`.
pub fn enumerate_first_type(tangential: &TangentialSet, radius: i64) -> Vec<ResonantPair> {
    let sites = tangential.sites();
    let reach = radius + isqrt_ceil(tangential.max_norm_sq()) + 1;
    let mut out = BTreeSet::new();
    for &i in sites {
        for &j in sites {
            if i == j {
                continue;
            }
            let d = i - j;
            let g = gcd(d.n1, d.n2);
            let step = Site::new(-d.n2 / g, d.n1 / g);
            for t in -reach..=reach {
                let n = j + step.scale(t);
                let m = n + d;
                if !n.within(radius) || !m.within(radius) {
                    continue;
                }
                if tangential.contains(n) || tangential.contains(m) {
                    continue;
                }
                let pair = ResonantPair {
                    kind: ResonanceKind::First,
                    n,
                    m,
                    i,
                    j,
                };
                debug_assert!(pair.satisfies_equations());
                out.insert(pair.canonical());
            }
        }
    }
    out.into_iter().collect()
}

/// Every resonance triplet with `n` in the `n` slot, checked directly from the
/// defining equations (no cutoff on the partner `m`).
pub fn triplets_at(tangential: &TangentialSet, n: Site) -> (Vec<ResonantPair>, Vec<ResonantPair>) {
    let mut first = Vec::new();
    let mut second = Vec::new();
    if tangential.contains(n) {
        return (first, second);
    }
    let sites = tangential.sites();
    for &i in sites {
        for &j in sites {
            if i == j {
                continue;
            }
            let m = n + i - j;
            if tangential.contains(m) {
                continue;
            }
            if i.norm_sq() - j.norm_sq() + n.norm_sq() - m.norm_sq() == 0 {
                first.push(ResonantPair {
                    kind: ResonanceKind::First,
                    n,
                    m,
                    i,
                    j,
                });
            }
        }
    }
    for (a, &i) in sites.iter().enumerate() {
        for &j in &sites[a..] {
            let m = i + j - n;
            if tangential.contains(m) {
                continue;
            }
            if n.norm_sq() + m.norm_sq() == i.norm_sq() + j.norm_sq() {
                let (i, j) = if i <= j { (i, j) } else { (j, i) };
                second.push(ResonantPair {
                    kind: ResonanceKind::Second,
                    n,
                    m,
                    i,
                    j,
                });
            }
        }
    }
    (first, second)
}

/// Tags a single site. The returned pair is oriented with the queried site in
/// the `n` slot.
pub fn classify_site(tangential: &TangentialSet, n: Site, radius: i64) -> Result<SiteClass, LatticeError> {
    if !n.within(radius) {
        return Err(LatticeError::OutsideRadius { site: n, radius });
    }
    if tangential.contains(n) {
        return Ok(SiteClass::Tangential);
    }
    let (first, second) = triplets_at(tangential, n);
    match (first.len(), second.len()) {
        (0, 0) => Ok(SiteClass::Generic),
        (1, 0) => Ok(SiteClass::FirstType(first[0])),
        (0, 1) => Ok(SiteClass::SecondType(second[0])),
        _ => Err(LatticeError::AmbiguousResonance {
            site: n,
            triplets: first.into_iter().chain(second).collect(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "violation")]
pub enum Violation {
    /// More than one first-type (or second-type) triplet at `site`.
    NonUniqueTriplet {
        site: Site,
        kind: ResonanceKind,
        triplets: Vec<ResonantPair>,
    },
    /// `site` lies in both `L₁` and `L₂`.
    BothKinds { site: Site, triplets: Vec<ResonantPair> },
    /// The partner of `pair.n` does not carry the mirrored triplet uniquely.
    BrokenInvolution {
        pair: ResonantPair,
        partner_triplets: Vec<ResonantPair>,
    },
}

#[derive(Clone, Debug, Serialize)]
pub struct AdmissibilityVerdict {
    pub admissible: bool,
    /// Largest radius up to which uniqueness was verified site by site.
    pub verified_radius: i64,
    #[serde(rename = "L1")]
    pub first_type: Vec<ResonantPair>,
    #[serde(rename = "L2")]
    pub second_type: Vec<ResonantPair>,
    pub violations: Vec<Violation>,
    /// Conditions of the full admissibility notion that are not checked here.
    pub unchecked: &'static str,
}

const UNCHECKED_NOTE: &str = "only triplet uniqueness, L1/L2 disjointness and the pairing involution \
are verified; further conditions of the full admissible-set definition are not checked";

/// Verifies uniqueness of triplets, `L₁ ∩ L₂ = ∅` and the pairing involution
/// for every normal site with `|n| ≤ radius`.
pub fn check_admissible(tangential: &TangentialSet, radius: i64) -> AdmissibilityVerdict {
    let mut violations = Vec::new();
    for n in sites_in_disk(radius) {
        if tangential.contains(n) {
            continue;
        }
        let (first, second) = triplets_at(tangential, n);
        if first.len() > 1 {
            violations.push(Violation::NonUniqueTriplet {
                site: n,
                kind: ResonanceKind::First,
                triplets: first.clone(),
            });
        }
        if second.len() > 1 {
            violations.push(Violation::NonUniqueTriplet {
                site: n,
                kind: ResonanceKind::Second,
                triplets: second.clone(),
            });
        }
        if !first.is_empty() && !second.is_empty() {
            violations.push(Violation::BothKinds {
                site: n,
                triplets: first.iter().chain(second.iter()).copied().collect(),
            });
        }
        let unique = match (first.len(), second.len()) {
            (1, 0) => Some(first[0]),
            (0, 1) => Some(second[0]),
            _ => None,
        };
        // A partner inside the disk reports its own violation; partners outside
        // the disk are checked here so the pairing is verified for every n.
        if let Some(pair) = unique.filter(|p| !p.m.within(radius)) {
            let (pf, ps) = triplets_at(tangential, pair.m);
            let mirror = pair.mirrored();
            let ok = pf.len() + ps.len() == 1 && pf.iter().chain(ps.iter()).all(|t| t.canonical() == mirror.canonical());
            if !ok {
                violations.push(Violation::BrokenInvolution {
                    pair,
                    partner_triplets: pf.into_iter().chain(ps).collect(),
                });
            }
        }
    }
    AdmissibilityVerdict {
        admissible: violations.is_empty(),
        verified_radius: radius,
        first_type: enumerate_first_type(tangential, radius),
        second_type: enumerate_second_type(tangential),
        violations,
        unchecked: UNCHECKED_NOTE,
    }
}

/// Classification of every site in a disk, built once and shared by the
/// normal-form and Melnikov stages.
#[derive(Clone, Debug)]
pub struct SiteAtlas {
    tangential: TangentialSet,
    radius: i64,
    classes: BTreeMap<Site, SiteClass>,
}

impl SiteAtlas {
    /// Fails with [`LatticeError::AmbiguousResonance`] on the first site that
    /// breaks uniqueness.
    pub fn build(tangential: &TangentialSet, radius: i64) -> Result<Self, LatticeError> {
        let mut classes = BTreeMap::new();
        for n in sites_in_disk(radius) {
            classes.insert(n, classify_site(tangential, n, radius)?);
        }
        for t in tangential.sites() {
            classes.entry(*t).or_insert(SiteClass::Tangential);
        }
        Ok(SiteAtlas {
            tangential: tangential.clone(),
            radius,
            classes,
        })
    }

    pub fn tangential(&self) -> &TangentialSet {
        &self.tangential
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    /// `None` outside the disk.
    pub fn class(&self, n: Site) -> Option<&SiteClass> {
        self.classes.get(&n)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, &SiteClass)> {
        self.classes.iter()
    }

    pub fn is_tangential(&self, n: Site) -> bool {
        self.tangential.contains(n)
    }

    /// Canonical first-type pairs with both ends inside the disk.
    pub fn first_type_pairs(&self) -> Vec<ResonantPair> {
        self.pairs_of(ResonanceKind::First)
    }

    /// Canonical second-type pairs with both ends inside the disk.
    pub fn second_type_pairs(&self) -> Vec<ResonantPair> {
        self.pairs_of(ResonanceKind::Second)
    }

    fn pairs_of(&self, kind: ResonanceKind) -> Vec<ResonantPair> {
        let set: BTreeSet<ResonantPair> = self
            .classes
            .values()
            .filter_map(|c| c.pair())
            .filter(|p| p.kind == kind && p.m.within(self.radius))
            .map(|p| p.canonical())
            .collect();
        set.into_iter().collect()
    }

    pub fn generic_sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.classes
            .iter()
            .filter(|(_, c)| matches!(c, SiteClass::Generic))
            .map(|(s, _)| *s)
    }

    /// Rows `(site, class, partner, i, j)` for the CSV atlas.
    pub fn csv_rows(&self) -> Vec<[String; 5]> {
        self.classes
            .iter()
            .map(|(s, c)| match c.pair() {
                Some(p) => [
                    s.to_string(),
                    c.label().to_string(),
                    p.m.to_string(),
                    p.i.to_string(),
                    p.j.to_string(),
                ],
                None => [s.to_string(), c.label().to_string(), String::new(), String::new(), String::new()],
            })
            .collect()
    }
}
