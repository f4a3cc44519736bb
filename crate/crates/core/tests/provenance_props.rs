//! Algebraic properties of provenance polynomials in standard form.

use proptest::prelude::*;

use dfc_core::provenance::{poly_add, poly_mul, poly_one, Monomial, Polynomial};
use dfc_core::schema::TupleId;

fn arb_tuple_id() -> impl Strategy<Value = TupleId> {
    (0..3u8, 0..6u64).prop_map(|(r, o)| {
        let rel = ["a", "b", "c"][r as usize];
        TupleId::new(rel, o)
    })
}

fn arb_monomial() -> impl Strategy<Value = Monomial> {
    prop::collection::vec(arb_tuple_id(), 1..4).prop_map(Monomial::of)
}

fn arb_poly() -> impl Strategy<Value = Polynomial> {
    prop::collection::vec(arb_monomial(), 0..5).prop_map(Polynomial::from_monomials)
}

/// Brute-force product used as the independent oracle for `poly_mul`:
/// concatenate factor lists pairwise, then canonicalize.
fn naive_mul(p: &Polynomial, q: &Polynomial) -> Polynomial {
    let mut monomials = Vec::new();
    for m in p.monomials() {
        for n in q.monomials() {
            let mut factors = m.factors().to_vec();
            factors.extend(n.factors().iter().cloned());
            monomials.push(Monomial::of(factors));
        }
    }
    Polynomial::from_monomials(monomials)
}

proptest! {
    #[test]
    fn mul_matches_naive_expansion(p in arb_poly(), q in arb_poly()) {
        prop_assert_eq!(poly_mul(&p, &q), naive_mul(&p, &q));
    }

    #[test]
    fn mul_commutes(p in arb_poly(), q in arb_poly()) {
        prop_assert_eq!(poly_mul(&p, &q), poly_mul(&q, &p));
    }

    #[test]
    fn add_associates(p in arb_poly(), q in arb_poly(), r in arb_poly()) {
        prop_assert_eq!(
            poly_add(&poly_add(&p, &q), &r),
            poly_add(&p, &poly_add(&q, &r))
        );
    }

    /// a*(b + c) and a*b + a*c denote the same standard form; this is the
    /// structural-invariance requirement aggregate pushdown relies on.
    #[test]
    fn mul_distributes_over_add(p in arb_poly(), q in arb_poly(), r in arb_poly()) {
        prop_assert_eq!(
            poly_mul(&p, &poly_add(&q, &r)),
            poly_add(&poly_mul(&p, &q), &poly_mul(&p, &r))
        );
    }

    #[test]
    fn one_is_identity(p in arb_poly()) {
        prop_assert_eq!(poly_mul(&poly_one(), &p), p.clone());
        prop_assert_eq!(poly_mul(&p, &poly_one()), p);
    }

    #[test]
    fn add_is_idempotent(p in arb_poly()) {
        prop_assert_eq!(poly_add(&p, &p), p);
    }

    #[test]
    fn normalize_is_identity_on_standard_form(p in arb_poly()) {
        prop_assert_eq!(p.normalize(), p);
    }

    /// Equality must not depend on construction order.
    #[test]
    fn construction_order_irrelevant(ms in prop::collection::vec(arb_monomial(), 0..6)) {
        let fwd = Polynomial::from_monomials(ms.clone());
        let rev = Polynomial::from_monomials(ms.into_iter().rev());
        prop_assert_eq!(fwd.to_string(), rev.to_string());
        prop_assert_eq!(fwd, rev);
    }
}
