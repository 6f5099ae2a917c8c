use proptest::prelude::*;
use structsearch::expr::{Expr, Kind};
use structsearch::grammar::{derive, replay, successors};

fn leaf(kind: Kind) -> Expr {
    Expr::leaf(kind)
}

/// Arbitrary expressions over all four leaf kinds, including non-canonical
/// transposes and nested sums.
fn raw_expr() -> impl Strategy<Value = Expr> {
    let leaves = prop_oneof![Just(Kind::G), Just(Kind::M), Just(Kind::B), Just(Kind::C)].prop_map(leaf);
    leaves.prop_recursive(4, 24, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 2..4).prop_map(Expr::Sum),
            prop::collection::vec(inner.clone(), 2..3).prop_map(Expr::Product),
            inner.clone().prop_map(|e| Expr::Transpose(Box::new(e))),
            (inner.clone(), inner).prop_map(|(a, b)| Expr::ElemProd(Box::new(Expr::Exp(Box::new(a))), Box::new(b))),
        ]
    })
}

/// A structure reached from `G` by a random walk over productions.
fn grammar_walk() -> impl Strategy<Value = Expr> {
    prop::collection::vec(any::<usize>(), 0..4).prop_map(|picks| {
        let mut e = Expr::g();
        for p in picks {
            let succ = successors(&e);
            e = succ[p % succ.len()].expr.clone();
        }
        e
    })
}

fn p(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

proptest! {
    #[test]
    fn canonical_structures_round_trip_through_text(e in grammar_walk()) {
        prop_assert_eq!(p(&e.to_string()), e);
    }

    #[test]
    fn printing_then_parsing_preserves_meaning(e in raw_expr()) {
        let reparsed = p(&e.to_string());
        prop_assert_eq!(reparsed.canonicalize().to_string(), e.canonicalize().to_string());
    }

    #[test]
    fn canonicalization_is_idempotent(e in raw_expr()) {
        let once = e.canonicalize();
        prop_assert!(once.is_canonical());
        prop_assert_eq!(once.canonicalize(), once);
    }

    #[test]
    fn transpose_is_an_involution(e in raw_expr()) {
        let c = e.canonicalize();
        prop_assert_eq!(c.transpose_structure().transpose_structure(), c);
    }

    #[test]
    fn derivations_replay_to_their_structure(e in grammar_walk()) {
        let steps = derive(&e).unwrap();
        prop_assert_eq!(replay(&steps).unwrap(), e);
    }
}

#[test]
fn transposed_chain() {
    assert_eq!(p("CG+G").transpose_structure().to_string(), "GC'+G");
    assert_eq!(p("M(GM'+G)+G").transpose_structure().to_string(), "(MG+G)M'+G");
}

#[test]
fn printed_forms_of_named_structures() {
    for s in ["MG+G", "GM'+G", "BG+G", "GB'+G", "(BG+G)B'+G", "(BG+G)(GB'+G)+G", "(CG+G)G+G"] {
        assert_eq!(p(s).to_string(), s);
    }
}
