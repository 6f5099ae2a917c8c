//! Production rules, successor generation and level enumeration.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{normalize, Expr, Kind, LeafId};

/// One of the eleven production rules. Each rewrites a single leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    /// `G -> GG+G`
    LowRank,
    /// `G -> MG+G`
    RowClusters,
    /// `G -> GM'+G`
    ColClusters,
    /// `M -> MG+G`
    ClusterTransform,
    /// `G -> CG+G`
    RowChain,
    /// `G -> GC'+G`
    ColChain,
    /// `G -> exp(G)oG`
    ScaleMixture,
    /// `G -> BG+G`
    RowFeatures,
    /// `G -> GB'+G`
    ColFeatures,
    /// `B -> BG+G`
    FeatureTransform,
    /// `M -> B`
    RelaxClusters,
}

pub const ALL_RULES: [Rule; 11] = [
    Rule::LowRank,
    Rule::RowClusters,
    Rule::ColClusters,
    Rule::ClusterTransform,
    Rule::RowChain,
    Rule::ColChain,
    Rule::ScaleMixture,
    Rule::RowFeatures,
    Rule::ColFeatures,
    Rule::FeatureTransform,
    Rule::RelaxClusters,
];

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::LowRank => "1",
            Rule::RowClusters => "2a",
            Rule::ColClusters => "2b",
            Rule::ClusterTransform => "3",
            Rule::RowChain => "4a",
            Rule::ColChain => "4b",
            Rule::ScaleMixture => "5",
            Rule::RowFeatures => "6a",
            Rule::ColFeatures => "6b",
            Rule::FeatureTransform => "7",
            Rule::RelaxClusters => "8",
        }
    }

    /// Kind of leaf the rule rewrites.
    pub fn pattern(self) -> Kind {
        match self {
            Rule::ClusterTransform | Rule::RelaxClusters => Kind::M,
            Rule::FeatureTransform => Kind::B,
            _ => Kind::G,
        }
    }

    /// Replacement with fresh leaves, written for an untransposed site.
    pub fn replacement(self) -> Expr {
        use Kind::*;
        let leaf = Expr::leaf;
        let t = |k| Expr::Transpose(Box::new(leaf(k)));
        let sum = |a: Expr, b: Expr| Expr::Sum(vec![Expr::Product(vec![a, b]), leaf(G)]);
        let e = match self {
            Rule::LowRank => sum(leaf(G), leaf(G)),
            Rule::RowClusters | Rule::ClusterTransform => sum(leaf(M), leaf(G)),
            Rule::ColClusters => sum(leaf(G), t(M)),
            Rule::RowChain => sum(leaf(C), leaf(G)),
            Rule::ColChain => sum(leaf(G), t(C)),
            Rule::ScaleMixture => Expr::ElemProd(Box::new(Expr::Exp(Box::new(leaf(G)))), Box::new(leaf(G))),
            Rule::RowFeatures | Rule::FeatureTransform => sum(leaf(B), leaf(G)),
            Rule::ColFeatures => sum(leaf(G), t(B)),
            Rule::RelaxClusters => leaf(B),
        };
        e.canonicalize()
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Rule {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_RULES
            .iter()
            .copied()
            .find(|r| r.id() == s)
            .ok_or_else(|| GrammarError::UnknownRule(s.to_string()))
    }
}

impl Serialize for Rule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for Rule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A rule applied at a leaf of the current canonical expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub rule: Rule,
    pub site: LeafId,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("unknown rule id {0:?}")]
    UnknownRule(String),
    #[error("no leaf {site} in {expr}")]
    NoSuchLeaf { site: LeafId, expr: String },
    #[error("rule {rule} rewrites {expected} but leaf {site} is {found}")]
    KindMismatch {
        rule: Rule,
        site: LeafId,
        expected: Kind,
        found: Kind,
    },
    #[error("{0} is not derivable from G")]
    NotDerivable(String),
}

/// Applies one production at a leaf and returns the canonical result.
pub fn apply(expr: &Expr, step: Step) -> Result<Expr, GrammarError> {
    let site = expr.find_leaf(step.site).ok_or_else(|| GrammarError::NoSuchLeaf {
        site: step.site,
        expr: expr.to_string(),
    })?;
    if site.kind != step.rule.pattern() {
        return Err(GrammarError::KindMismatch {
            rule: step.rule,
            site: step.site,
            expected: step.rule.pattern(),
            found: site.kind,
        });
    }
    let rhs = step.rule.replacement();
    let rhs = if site.transposed {
        normalize(&Expr::Transpose(Box::new(rhs)))
    } else {
        rhs
    };
    Ok(expr.replace_site(step.site, &rhs).canonicalize())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Successor {
    pub expr: Expr,
    pub step: Step,
}

/// All single-production successors, deduplicated by canonical form and
/// ordered by leaf then rule.
pub fn successors(expr: &Expr) -> Vec<Successor> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for leaf in expr.leaves() {
        for rule in ALL_RULES {
            if rule.pattern() != leaf.kind {
                continue;
            }
            let step = Step { rule, site: leaf.id };
            let next = apply(expr, step).expect("site and kind were checked");
            if seen.insert(next.to_string()) {
                out.push(Successor { expr: next, step });
            }
        }
    }
    out
}

/// Distinct structures by the minimal number of productions needed to reach
/// them; `levels[i]` holds the level-i structures in discovery order.
pub fn enumerate_levels(k: usize) -> Vec<Vec<Expr>> {
    let mut seen: HashSet<String> = HashSet::new();
    let g = Expr::g();
    seen.insert(g.to_string());
    let mut levels = vec![vec![g]];
    for _ in 0..k {
        let mut next = Vec::new();
        for e in levels.last().unwrap() {
            for s in successors(e) {
                if seen.insert(s.expr.to_string()) {
                    next.push(s.expr);
                }
            }
        }
        levels.push(next);
    }
    levels
}

/// All distinct structures derivable from `G` in at most `k` productions,
/// including `G` itself.
pub fn enumerate_to_level(k: usize) -> Vec<Expr> {
    enumerate_levels(k).into_iter().flatten().collect()
}

/// Replays a derivation starting from `G`.
pub fn replay(steps: &[Step]) -> Result<Expr, GrammarError> {
    let mut e = Expr::g();
    for &s in steps {
        e = apply(&e, s)?;
    }
    Ok(e)
}

const MARK: LeafId = LeafId::MAX;

/// Finds a derivation of an expression from `G` by undoing productions
/// depth first. Terminates because every reduction removes a leaf or turns a
/// `B` into an `M`.
pub fn derive(expr: &Expr) -> Result<Vec<Step>, GrammarError> {
    let target = expr.canonicalize();
    let mut failed = HashSet::new();
    let mut memo = HashMap::new();
    match derive_rec(&target, &mut failed, &mut memo) {
        Some(steps) => {
            debug_assert_eq!(replay(&steps).map(|e| e.to_string()), Ok(target.to_string()));
            Ok(steps)
        }
        None => Err(GrammarError::NotDerivable(target.to_string())),
    }
}

fn derive_rec(
    e: &Expr,
    failed: &mut HashSet<String>,
    memo: &mut HashMap<String, Vec<Step>>,
) -> Option<Vec<Step>> {
    let text = e.to_string();
    if text == "G" {
        return Some(Vec::new());
    }
    if failed.contains(&text) {
        return None;
    }
    if let Some(s) = memo.get(&text) {
        return Some(s.clone());
    }
    for (reduced, rule) in reductions(e) {
        let site = reduced
            .leaves()
            .iter()
            .position(|l| l.id == MARK)
            .expect("reduction marks its leaf") as LeafId;
        let mut canon = reduced;
        canon.renumber();
        let step = Step { rule, site };
        // Reductions are only candidates; confirm the forward step.
        match apply(&canon, step) {
            Ok(fwd) if fwd.to_string() == text => {}
            _ => continue,
        }
        if let Some(mut steps) = derive_rec(&canon, failed, memo) {
            steps.push(step);
            memo.insert(text, steps.clone());
            return Some(steps);
        }
    }
    failed.insert(text);
    None
}

fn marked(kind: Kind, transposed: bool) -> Expr {
    let l = Expr::Leaf { kind, id: MARK };
    if transposed {
        Expr::Transpose(Box::new(l))
    } else {
        l
    }
}

fn leaf_kind(e: &Expr) -> Option<(Kind, bool)> {
    match e {
        Expr::Leaf { kind, .. } => Some((*kind, false)),
        Expr::Transpose(inner) => match inner.as_ref() {
            Expr::Leaf { kind, .. } => Some((*kind, true)),
            _ => None,
        },
        _ => None,
    }
}

/// Candidate `lhs` replacements for an `X + G` pair.
fn pair_reductions(p: &Expr, allow_non_g: bool) -> Vec<(Expr, Rule)> {
    use Kind::*;
    let Expr::Product(ops) = p else { return Vec::new() };
    if ops.len() != 2 {
        return Vec::new();
    }
    let (Some(a), Some(b)) = (leaf_kind(&ops[0]), leaf_kind(&ops[1])) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    match (a, b) {
        ((G, false), (G, false)) => out.push((marked(G, false), Rule::LowRank)),
        ((M, false), (G, false)) => {
            out.push((marked(G, false), Rule::RowClusters));
            if allow_non_g {
                out.push((marked(M, false), Rule::ClusterTransform));
            }
        }
        ((G, false), (M, true)) => {
            out.push((marked(G, false), Rule::ColClusters));
            if allow_non_g {
                out.push((marked(M, true), Rule::ClusterTransform));
            }
        }
        ((C, false), (G, false)) => out.push((marked(G, false), Rule::RowChain)),
        ((G, false), (C, true)) => out.push((marked(G, false), Rule::ColChain)),
        ((B, false), (G, false)) => {
            out.push((marked(G, false), Rule::RowFeatures));
            if allow_non_g {
                out.push((marked(B, false), Rule::FeatureTransform));
            }
        }
        ((G, false), (B, true)) => {
            out.push((marked(G, false), Rule::ColFeatures));
            if allow_non_g {
                out.push((marked(B, true), Rule::FeatureTransform));
            }
        }
        _ => {}
    }
    out
}

/// Every way of undoing one production somewhere in `e`. The rewritten leaf
/// carries the id `MARK`; the result is flattened but not renumbered.
fn reductions(e: &Expr) -> Vec<(Expr, Rule)> {
    let mut out = Vec::new();
    match e {
        Expr::Leaf { kind: Kind::B, .. } => out.push((marked(Kind::M, false), Rule::RelaxClusters)),
        Expr::Leaf { .. } => {}
        Expr::Transpose(inner) => {
            if let Expr::Leaf { kind: Kind::B, .. } = inner.as_ref() {
                out.push((marked(Kind::M, true), Rule::RelaxClusters));
            }
        }
        Expr::Sum(ops) => {
            let n = ops.len();
            if ops[n - 1].is_g_leaf() {
                if n == 2 {
                    out.extend(pair_reductions(&ops[0], true));
                } else {
                    for (rep, rule) in pair_reductions(&ops[n - 2], false) {
                        let mut v = ops[..n - 2].to_vec();
                        v.push(rep);
                        out.push((Expr::Sum(v), rule));
                    }
                }
            }
            for (i, op) in ops.iter().enumerate() {
                for (rep, rule) in reductions(op) {
                    let mut v = ops.clone();
                    v[i] = rep;
                    out.push((normalize(&Expr::Sum(v)), rule));
                }
            }
        }
        Expr::Product(ops) => {
            for (i, op) in ops.iter().enumerate() {
                for (rep, rule) in reductions(op) {
                    let mut v = ops.clone();
                    v[i] = rep;
                    out.push((normalize(&Expr::Product(v)), rule));
                }
            }
        }
        Expr::ElemProd(a, b) => {
            if let (Expr::Exp(z), true) = (a.as_ref(), b.is_g_leaf()) {
                if z.is_g_leaf() {
                    out.push((marked(Kind::G, false), Rule::ScaleMixture));
                }
            }
            for (rep, rule) in reductions(a) {
                out.push((Expr::ElemProd(Box::new(rep), b.clone()), rule));
            }
            for (rep, rule) in reductions(b) {
                out.push((Expr::ElemProd(a.clone(), Box::new(rep)), rule));
            }
        }
        Expr::Exp(inner) => {
            for (rep, rule) in reductions(inner) {
                out.push((Expr::Exp(Box::new(rep)), rule));
            }
        }
    }
    out
}
