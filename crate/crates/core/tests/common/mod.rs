//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use cnls_core::lattice::{sites_in_disk, ResonanceKind, ResonantPair, Site, TangentialSet};

/// Every pair `(n, m)` in a disk, indexed by a quadratic invariant.
pub struct PairTable {
    by_key: HashMap<(Site, i64), Vec<(Site, Site)>>,
}

impl PairTable {
    /// Key `(m − n, |m|² − |n|²)`: first-type resonances with `i − j = m − n`.
    pub fn differences(radius: i64) -> Self {
        let sites: Vec<Site> = sites_in_disk(radius).collect();
        let mut by_key: HashMap<(Site, i64), Vec<(Site, Site)>> = HashMap::new();
        for &n in &sites {
            for &m in &sites {
                by_key
                    .entry((m - n, m.norm_sq() - n.norm_sq()))
                    .or_default()
                    .push((n, m));
            }
        }
        PairTable { by_key }
    }

    /// Key `(n + m, |n|² + |m|²)`: second-type resonances with `n + m = i + j`.
    pub fn sums(radius: i64) -> Self {
        let sites: Vec<Site> = sites_in_disk(radius).collect();
        let mut by_key: HashMap<(Site, i64), Vec<(Site, Site)>> = HashMap::new();
        for &n in &sites {
            for &m in &sites {
                by_key
                    .entry((n + m, n.norm_sq() + m.norm_sq()))
                    .or_default()
                    .push((n, m));
            }
        }
        PairTable { by_key }
    }

    fn get(&self, key: (Site, i64)) -> &[(Site, Site)] {
        self.by_key.get(&key).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn oriented(kind: ResonanceKind, n: Site, m: Site, i: Site, j: Site) -> ResonantPair {
    let (n, m, i, j) = match kind {
        ResonanceKind::First if n > m => (m, n, j, i),
        ResonanceKind::Second if n > m => (m, n, i, j),
        _ => (n, m, i, j),
    };
    let (i, j) = if kind == ResonanceKind::Second && i > j { (j, i) } else { (i, j) };
    ResonantPair { kind, n, m, i, j }
}

/// First-type pairs inside the table's disk, from an exhaustive pair scan.
pub fn brute_first_type(table: &PairTable, set: &TangentialSet) -> BTreeSet<ResonantPair> {
    let mut out = BTreeSet::new();
    for &i in set.sites() {
        for &j in set.sites() {
            if i == j {
                continue;
            }
            for &(n, m) in table.get((i - j, i.norm_sq() - j.norm_sq())) {
                if set.contains(n) || set.contains(m) {
                    continue;
                }
                assert_eq!(i - j + n - m, Site::ORIGIN);
                out.insert(oriented(ResonanceKind::First, n, m, i, j));
            }
        }
    }
    out
}

/// Second-type pairs; the table must cover `|n|² ≤ 2·max|i|²`.
pub fn brute_second_type(table: &PairTable, set: &TangentialSet) -> BTreeSet<ResonantPair> {
    let mut out = BTreeSet::new();
    for &i in set.sites() {
        for &j in set.sites() {
            for &(n, m) in table.get((i + j, i.norm_sq() + j.norm_sq())) {
                if set.contains(n) || set.contains(m) {
                    continue;
                }
                out.insert(oriented(ResonanceKind::Second, n, m, i, j));
            }
        }
    }
    out
}

/// All tangential sets with `1 ≤ b ≤ max_b` sites of norm at most `max_norm`.
pub fn small_sets(max_b: usize, max_norm: i64) -> Vec<TangentialSet> {
    let sites: Vec<Site> = sites_in_disk(max_norm).collect();
    let mut out = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    fn rec(sites: &[Site], start: usize, max_b: usize, stack: &mut Vec<usize>, out: &mut Vec<TangentialSet>) {
        if !stack.is_empty() {
            out.push(TangentialSet::new(stack.iter().map(|&k| sites[k]).collect()).unwrap());
        }
        if stack.len() == max_b {
            return;
        }
        for k in start..sites.len() {
            stack.push(k);
            rec(sites, k + 1, max_b, stack, out);
            stack.pop();
        }
    }
    rec(&sites, 0, max_b, &mut stack, &mut out);
    out
}

/// `det(2·11ᵀ − I)` for a `b×b` matrix by floating-point LU.
pub fn twist_det(b: usize) -> f64 {
    let m = nalgebra::DMatrix::from_fn(b, b, |r, c| if r == c { 1.0 } else { 2.0 });
    m.determinant()
}
