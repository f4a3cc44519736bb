//! Provenance polynomials in standard form.
//!
//! Every derived tuple carries a polynomial over input-tuple identifiers:
//! `*` records joining, `+` records alternative derivations (aggregation or
//! deduplication). A polynomial is kept permanently in standard form - a set
//! of monomials with all parentheses expanded - so structurally different but
//! equivalent plans (e.g. an aggregate pushed below a join) annotate outputs
//! identically. Monomials are multisets: a self-join legitimately repeats a
//! tuple identifier.

use std::collections::BTreeSet;
use std::fmt;

use crate::schema::TupleId;

/// One derivation: the sorted multiset of input tuples that jointly produced
/// an output tuple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial {
    factors: Vec<TupleId>,
}

impl Monomial {
    pub fn unit() -> Monomial {
        Monomial {
            factors: Vec::new(),
        }
    }

    pub fn of(factors: Vec<TupleId>) -> Monomial {
        let mut factors = factors;
        factors.sort();
        Monomial { factors }
    }

    pub fn single(id: TupleId) -> Monomial {
        Monomial { factors: vec![id] }
    }

    pub fn factors(&self) -> &[TupleId] {
        &self.factors
    }

    pub fn is_unit(&self) -> bool {
        self.factors.is_empty()
    }

    /// Multiset union of the two factor lists (merge of sorted vecs).
    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut out = Vec::with_capacity(self.factors.len() + other.factors.len());
        let (mut i, mut j) = (0, 0);
        while i < self.factors.len() && j < other.factors.len() {
            if self.factors[i] <= other.factors[j] {
                out.push(self.factors[i].clone());
                i += 1;
            } else {
                out.push(other.factors[j].clone());
                j += 1;
            }
        }
        out.extend_from_slice(&self.factors[i..]);
        out.extend(other.factors[j..].iter().cloned());
        Monomial { factors: out }
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return f.write_str("1");
        }
        let parts: Vec<String> = self.factors.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join("*"))
    }
}

/// A coefficient-free sum of monomials. Duplicate derivations collapse; the
/// empty polynomial annotates no real output row (the one exception is the
/// SQL-mandated single row of a global aggregate over empty input).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Polynomial {
    monomials: BTreeSet<Monomial>,
}

impl Polynomial {
    pub fn zero() -> Polynomial {
        Polynomial::default()
    }

    /// Multiplicative identity `{1}`. Used only as a fold seed for joins;
    /// never attached to executor output.
    pub fn one() -> Polynomial {
        let mut monomials = BTreeSet::new();
        monomials.insert(Monomial::unit());
        Polynomial { monomials }
    }

    pub fn from_tuple(id: TupleId) -> Polynomial {
        let mut monomials = BTreeSet::new();
        monomials.insert(Monomial::single(id));
        Polynomial { monomials }
    }

    pub fn from_monomials(ms: impl IntoIterator<Item = Monomial>) -> Polynomial {
        Polynomial {
            monomials: ms.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomials(&self) -> impl Iterator<Item = &Monomial> {
        self.monomials.iter()
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    /// Product: pairwise multiset-union of monomials, deduplicated.
    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = BTreeSet::new();
        for m in &self.monomials {
            for n in &other.monomials {
                out.insert(m.mul(n));
            }
        }
        Polynomial { monomials: out }
    }

    /// Sum: set union of monomials.
    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut monomials = self.monomials.clone();
        monomials.extend(other.monomials.iter().cloned());
        Polynomial { monomials }
    }

    /// In-place sum, for accumulator loops.
    pub fn merge(&mut self, other: &Polynomial) {
        self.monomials.extend(other.monomials.iter().cloned());
    }

    /// Re-derives the standard form. The representation is standard form by
    /// construction, so this is the identity; it exists so tests can state
    /// that as a property.
    pub fn normalize(&self) -> Polynomial {
        Polynomial::from_monomials(
            self.monomials
                .iter()
                .map(|m| Monomial::of(m.factors().to_vec())),
        )
    }

    /// All tuples of `relation` appearing in any monomial: the contributor
    /// set underlying `i ~> o`.
    pub fn contributors(&self, relation: &str) -> BTreeSet<TupleId> {
        let relation = relation.to_lowercase();
        let mut out = BTreeSet::new();
        for m in &self.monomials {
            for t in m.factors() {
                if t.relation.as_ref() == relation {
                    out.insert(t.clone());
                }
            }
        }
        out
    }

    /// Whether `id` contributes to the annotated tuple.
    pub fn contains(&self, id: &TupleId) -> bool {
        self.monomials
            .iter()
            .any(|m| m.factors().iter().any(|t| t == id))
    }
}

impl fmt::Display for Polynomial {
    /// Canonical debug form: monomials in sorted order joined by ` + `,
    /// factors joined by `*`, e.g. `a1*b1 + a1*b2`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.monomials.is_empty() {
            return f.write_str("0");
        }
        let parts: Vec<String> = self.monomials.iter().map(|m| m.to_string()).collect();
        f.write_str(&parts.join(" + "))
    }
}

pub fn poly_one() -> Polynomial {
    Polynomial::one()
}

pub fn poly_mul(p: &Polynomial, q: &Polynomial) -> Polynomial {
    p.mul(q)
}

pub fn poly_add(p: &Polynomial, q: &Polynomial) -> Polynomial {
    p.add(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tid(rel: &str, ord: u64) -> TupleId {
        TupleId::new(rel, ord)
    }

    fn poly(monos: Vec<Vec<TupleId>>) -> Polynomial {
        Polynomial::from_monomials(monos.into_iter().map(Monomial::of))
    }

    #[test]
    fn join_then_aggregate_shape() {
        // {a1} * {b1, b2} = {a1*b1, a1*b2}
        let a1 = Polynomial::from_tuple(tid("a", 0));
        let b = poly(vec![vec![tid("b", 0)], vec![tid("b", 1)]]);
        let product = poly_mul(&a1, &b);
        assert_eq!(product.to_string(), "a1*b1 + a1*b2");
    }

    #[test]
    fn one_is_multiplicative_identity() {
        let p = poly(vec![vec![tid("a", 0), tid("b", 1)], vec![tid("a", 2)]]);
        assert_eq!(poly_mul(&poly_one(), &p), p);
        assert_eq!(poly_mul(&p, &poly_one()), p);
    }

    #[test]
    fn fold_from_seed_over_single_scan_tuple() {
        let folded = poly_mul(&poly_one(), &Polynomial::from_tuple(tid("a", 0)));
        assert_eq!(folded.to_string(), "a1");
    }

    #[test]
    fn self_join_keeps_multiplicity() {
        let a1 = Polynomial::from_tuple(tid("a", 0));
        let sq = poly_mul(&a1, &a1);
        assert_eq!(sq.to_string(), "a1*a1");
    }

    #[test]
    fn add_is_set_union_and_idempotent() {
        let p = poly(vec![vec![tid("a", 0), tid("b", 0)]]);
        let q = poly(vec![vec![tid("a", 0), tid("b", 1)]]);
        assert_eq!(poly_add(&p, &q).to_string(), "a1*b1 + a1*b2");
        assert_eq!(poly_add(&p, &p), p);
    }

    #[test]
    fn contributors_by_relation() {
        let p = poly(vec![
            vec![tid("a", 0), tid("b", 0)],
            vec![tid("a", 0), tid("b", 1)],
        ]);
        let a: Vec<String> = p.contributors("a").iter().map(|t| t.to_string()).collect();
        let b: Vec<String> = p.contributors("b").iter().map(|t| t.to_string()).collect();
        assert_eq!(a, vec!["a1"]);
        assert_eq!(b, vec!["b1", "b2"]);
        assert!(p.contributors("zzz").is_empty());
    }

    #[test]
    fn equality_is_construction_order_independent() {
        let p = poly(vec![vec![tid("b", 1), tid("a", 0)], vec![tid("a", 1)]]);
        let q = poly(vec![vec![tid("a", 1)], vec![tid("a", 0), tid("b", 1)]]);
        assert_eq!(p, q);
    }

    #[test]
    fn normalize_is_identity_on_standard_form() {
        let p = poly(vec![
            vec![tid("a", 0), tid("b", 0)],
            vec![tid("c", 3), tid("a", 0)],
        ]);
        assert_eq!(p.normalize(), p);
    }
}
