//! Algebraic expressions describing matrix decomposition structures.
//!
//! A structure is a tree over four component kinds (`G`, `M`, `B`, `C`)
//! combined with addition, matrix product, transpose, elementwise product
//! and elementwise exponentiation. The textual syntax used throughout the
//! crate is:
//!
//! ```text
//! M(GM'+G)+G      co-clustering
//! (exp(G)oG)G+G   sparse coding
//! ```
//!
//! Juxtaposition is matrix product, `'` is transpose, `o` is the elementwise
//! product and `exp(..)` is elementwise exponentiation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Component prior of a leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    /// Independent Gaussian entries.
    G,
    /// One-hot rows (cluster assignments).
    M,
    /// Independent Bernoulli entries.
    B,
    /// Deterministic lower-triangular integration matrix.
    C,
}

impl Kind {
    pub fn letter(self) -> char {
        match self {
            Kind::G => 'G',
            Kind::M => 'M',
            Kind::B => 'B',
            Kind::C => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<Kind> {
        match c {
            'G' => Some(Kind::G),
            'M' => Some(Kind::M),
            'B' => Some(Kind::B),
            'C' => Some(Kind::C),
            _ => None,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Identifier of a leaf, unique within one expression.
pub type LeafId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Leaf { kind: Kind, id: LeafId },
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    Transpose(Box<Expr>),
    /// `left o right`; the grammar only ever produces `exp(..) o ..`.
    ElemProd(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
}

/// Leaf occurrence found during a left-to-right traversal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafSite {
    pub id: LeafId,
    pub kind: Kind,
    /// The leaf sits directly under a `Transpose`.
    pub transposed: bool,
}

impl Expr {
    pub fn leaf(kind: Kind) -> Expr {
        Expr::Leaf { kind, id: 0 }
    }

    pub fn g() -> Expr {
        Expr::leaf(Kind::G)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Expr::Leaf { .. })
    }

    pub fn is_g_leaf(&self) -> bool {
        matches!(self, Expr::Leaf { kind: Kind::G, .. })
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<LeafSite> {
        let mut out = Vec::new();
        self.collect_leaves(false, &mut out);
        out
    }

    fn collect_leaves(&self, transposed: bool, out: &mut Vec<LeafSite>) {
        match self {
            Expr::Leaf { kind, id } => out.push(LeafSite {
                id: *id,
                kind: *kind,
                transposed,
            }),
            Expr::Sum(ops) | Expr::Product(ops) => {
                for op in ops {
                    op.collect_leaves(false, out);
                }
            }
            Expr::Transpose(inner) => inner.collect_leaves(inner.is_leaf(), out),
            Expr::ElemProd(a, b) => {
                a.collect_leaves(false, out);
                b.collect_leaves(false, out);
            }
            Expr::Exp(inner) => inner.collect_leaves(false, out),
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().len()
    }

    /// Assigns ids 0, 1, 2, ... in left-to-right order.
    pub fn renumber(&mut self) {
        let mut next = 0;
        self.renumber_from(&mut next);
    }

    fn renumber_from(&mut self, next: &mut LeafId) {
        match self {
            Expr::Leaf { id, .. } => {
                *id = *next;
                *next += 1;
            }
            Expr::Sum(ops) | Expr::Product(ops) => {
                for op in ops {
                    op.renumber_from(next);
                }
            }
            Expr::Transpose(inner) | Expr::Exp(inner) => inner.renumber_from(next),
            Expr::ElemProd(a, b) => {
                a.renumber_from(next);
                b.renumber_from(next);
            }
        }
    }

    pub fn find_leaf(&self, id: LeafId) -> Option<LeafSite> {
        self.leaves().into_iter().find(|s| s.id == id)
    }

    /// Replaces the leaf with the given id. When the leaf sits under a
    /// transpose the transpose node itself is replaced, so `replacement` is
    /// expected to already account for the orientation.
    pub(crate) fn replace_site(&self, id: LeafId, replacement: &Expr) -> Expr {
        match self {
            Expr::Leaf { id: lid, .. } if *lid == id => replacement.clone(),
            Expr::Leaf { .. } => self.clone(),
            Expr::Transpose(inner) => match inner.as_ref() {
                Expr::Leaf { id: lid, .. } if *lid == id => replacement.clone(),
                _ => Expr::Transpose(Box::new(inner.replace_site(id, replacement))),
            },
            Expr::Sum(ops) => Expr::Sum(ops.iter().map(|o| o.replace_site(id, replacement)).collect()),
            Expr::Product(ops) => {
                Expr::Product(ops.iter().map(|o| o.replace_site(id, replacement)).collect())
            }
            Expr::ElemProd(a, b) => Expr::ElemProd(
                Box::new(a.replace_site(id, replacement)),
                Box::new(b.replace_site(id, replacement)),
            ),
            Expr::Exp(inner) => Expr::Exp(Box::new(inner.replace_site(id, replacement))),
        }
    }

    /// Structural normal form: transposes pushed down to `M`, `B` and `C`
    /// leaves (a transposed Gaussian is again a Gaussian), nested sums and
    /// products flattened, and leaf ids renumbered left to right. Operand
    /// order is never changed.
    pub fn canonicalize(&self) -> Expr {
        let mut e = normalize(self);
        e.renumber();
        e
    }

    /// True when the expression is already in canonical form.
    pub fn is_canonical(&self) -> bool {
        *self == self.canonicalize()
    }

    /// The structure modelling the transposed data matrix.
    pub fn transpose_structure(&self) -> Expr {
        let mut e = normalize(&push_transpose(self, true));
        e.renumber();
        e
    }

    /// Parses the textual syntax and canonicalizes the result.
    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        let mut p = Parser::new(text);
        let e = p.sum()?;
        p.skip_ws();
        if let Some(c) = p.peek() {
            return Err(ParseError::Unexpected { found: c, pos: p.pos });
        }
        Ok(e.canonicalize())
    }
}

pub(crate) fn normalize(e: &Expr) -> Expr {
    flatten(&push_transpose(e, false))
}

fn push_transpose(e: &Expr, t: bool) -> Expr {
    match e {
        Expr::Leaf { kind: Kind::G, .. } => e.clone(),
        Expr::Leaf { .. } => {
            if t {
                Expr::Transpose(Box::new(e.clone()))
            } else {
                e.clone()
            }
        }
        Expr::Sum(ops) => Expr::Sum(ops.iter().map(|o| push_transpose(o, t)).collect()),
        Expr::Product(ops) => {
            if t {
                Expr::Product(ops.iter().rev().map(|o| push_transpose(o, true)).collect())
            } else {
                Expr::Product(ops.iter().map(|o| push_transpose(o, false)).collect())
            }
        }
        Expr::Transpose(inner) => push_transpose(inner, !t),
        Expr::ElemProd(a, b) => {
            Expr::ElemProd(Box::new(push_transpose(a, t)), Box::new(push_transpose(b, t)))
        }
        Expr::Exp(inner) => Expr::Exp(Box::new(push_transpose(inner, t))),
    }
}

fn flatten(e: &Expr) -> Expr {
    match e {
        Expr::Leaf { .. } => e.clone(),
        Expr::Sum(ops) => {
            let mut out = Vec::new();
            for op in ops {
                match flatten(op) {
                    Expr::Sum(inner) => out.extend(inner),
                    other => out.push(other),
                }
            }
            if out.len() == 1 {
                out.pop().unwrap()
            } else {
                Expr::Sum(out)
            }
        }
        Expr::Product(ops) => {
            let mut out = Vec::new();
            for op in ops {
                match flatten(op) {
                    Expr::Product(inner) => out.extend(inner),
                    other => out.push(other),
                }
            }
            if out.len() == 1 {
                out.pop().unwrap()
            } else {
                Expr::Product(out)
            }
        }
        Expr::Transpose(inner) => Expr::Transpose(Box::new(flatten(inner))),
        Expr::ElemProd(a, b) => Expr::ElemProd(Box::new(flatten(a)), Box::new(flatten(b))),
        Expr::Exp(inner) => Expr::Exp(Box::new(flatten(inner))),
    }
}

fn needs_parens_in_product(e: &Expr) -> bool {
    matches!(e, Expr::Sum(_) | Expr::ElemProd(..))
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Leaf { kind, .. } => write!(f, "{kind}"),
            Expr::Sum(ops) => {
                for (i, op) in ops.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    if matches!(op, Expr::Sum(_)) {
                        write!(f, "({op})")?;
                    } else {
                        write!(f, "{op}")?;
                    }
                }
                Ok(())
            }
            Expr::Product(ops) => {
                for op in ops {
                    if needs_parens_in_product(op) || matches!(op, Expr::Product(_)) {
                        write!(f, "({op})")?;
                    } else {
                        write!(f, "{op}")?;
                    }
                }
                Ok(())
            }
            Expr::Transpose(inner) => {
                if inner.is_leaf() {
                    write!(f, "{inner}'")
                } else {
                    write!(f, "({inner})'")
                }
            }
            Expr::ElemProd(a, b) => {
                if needs_parens_in_product(a) {
                    write!(f, "({a})o")?;
                } else {
                    write!(f, "{a}o")?;
                }
                if needs_parens_in_product(b) {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
            Expr::Exp(inner) => write!(f, "exp({inner})"),
        }
    }
}

impl FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse(s)
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Expr::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unexpected character {found:?} at offset {pos}")]
    Unexpected { found: char, pos: usize },
    #[error("unexpected end of input")]
    Eof,
    #[error("elementwise product at offset {pos} must have exp(..) on its left")]
    BareElemProd { pos: usize },
}

struct Parser<'a> {
    chars: Vec<(usize, char)>,
    idx: usize,
    pos: usize,
    _src: &'a str,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            chars: src.char_indices().collect(),
            idx: 0,
            pos: 0,
            _src: src,
        }
    }

    fn skip_ws(&mut self) {
        while let Some(&(_, c)) = self.chars.get(self.idx) {
            if c.is_whitespace() {
                self.idx += 1;
            } else {
                break;
            }
        }
        self.pos = self.chars.get(self.idx).map(|c| c.0).unwrap_or(usize::MAX);
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.idx).map(|c| c.1)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.idx += 1;
        }
        c
    }

    fn expect(&mut self, want: char) -> Result<(), ParseError> {
        match self.bump() {
            Some(c) if c == want => Ok(()),
            Some(c) => Err(ParseError::Unexpected {
                found: c,
                pos: self.pos,
            }),
            None => Err(ParseError::Eof),
        }
    }

    fn at_exp(&mut self) -> bool {
        self.skip_ws();
        let rest: String = self.chars[self.idx..].iter().take(3).map(|c| c.1).collect();
        rest == "exp"
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut ops = vec![self.elem()?];
        while self.peek() == Some('+') {
            self.bump();
            ops.push(self.elem()?);
        }
        Ok(if ops.len() == 1 { ops.pop().unwrap() } else { Expr::Sum(ops) })
    }

    fn elem(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let left = self.prod()?;
        if matches!(self.peek(), Some('o') | Some('∘')) {
            self.bump();
            if !matches!(left, Expr::Exp(_)) {
                return Err(ParseError::BareElemProd { pos: start });
            }
            let right = self.elem()?;
            return Ok(Expr::ElemProd(Box::new(left), Box::new(right)));
        }
        Ok(left)
    }

    fn prod(&mut self) -> Result<Expr, ParseError> {
        let mut ops = vec![self.postfix()?];
        loop {
            match self.peek() {
                Some('G' | 'M' | 'B' | 'C' | '(') => ops.push(self.postfix()?),
                Some('e') if self.at_exp() => ops.push(self.postfix()?),
                _ => break,
            }
        }
        Ok(if ops.len() == 1 { ops.pop().unwrap() } else { Expr::Product(ops) })
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.atom()?;
        while matches!(self.peek(), Some('\'') | Some('ᵀ')) {
            self.bump();
            e = Expr::Transpose(Box::new(e));
        }
        Ok(e)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        if self.at_exp() {
            self.idx += 3;
            self.expect('(')?;
            let inner = self.sum()?;
            self.expect(')')?;
            return Ok(Expr::Exp(Box::new(inner)));
        }
        match self.bump() {
            Some('(') => {
                let inner = self.sum()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some(c) => match Kind::from_letter(c) {
                Some(kind) => Ok(Expr::leaf(kind)),
                None => Err(ParseError::Unexpected { found: c, pos: self.pos }),
            },
            None => Err(ParseError::Eof),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    #[test]
    fn prints_paper_structures() {
        for s in [
            "G",
            "GG+G",
            "MG+G",
            "GM'+G",
            "M(GM'+G)+G",
            "(MG+G)(GM'+G)+G",
            "(exp(G)oG)G+G",
            "(exp(GG+G)oG)G+G",
            "CG+G",
            "C(GG+G)+G",
            "(CG+G)G+G",
            "exp(G)oG",
            "GG+exp(G)o(GG+G)",
        ] {
            assert_eq!(p(s).to_string(), s);
        }
    }

    #[test]
    fn accepts_unicode_and_whitespace() {
        assert_eq!(p("M (G Mᵀ + G) + G").to_string(), "M(GM'+G)+G");
        assert_eq!(p("(exp(G) ∘ G) G + G").to_string(), "(exp(G)oG)G+G");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(Expr::parse("G+"), Err(ParseError::Eof)));
        assert!(matches!(Expr::parse("GX"), Err(ParseError::Unexpected { found: 'X', .. })));
        assert!(matches!(Expr::parse("GoG"), Err(ParseError::BareElemProd { .. })));
        assert!(Expr::parse("(G").is_err());
    }

    #[test]
    fn leaf_ids_follow_traversal_order() {
        let e = p("M(GM'+G)+G");
        let ids: Vec<_> = e.leaves().iter().map(|l| (l.id, l.kind, l.transposed)).collect();
        assert_eq!(
            ids,
            vec![
                (0, Kind::M, false),
                (1, Kind::G, false),
                (2, Kind::M, true),
                (3, Kind::G, false),
                (4, Kind::G, false)
            ]
        );
    }

    #[test]
    fn canonical_pushes_transposes_to_leaves() {
        assert_eq!(p("G(MG+G)'+G").to_string(), "G(GM'+G)+G");
        assert_eq!(p("(M')'G+G").to_string(), "MG+G");
        assert_eq!(p("G'G+G").to_string(), "GG+G");
    }

    #[test]
    fn canonical_flattens_nested_sums() {
        assert_eq!(p("GG+(GG+G)").to_string(), "GG+GG+G");
        let e = p("GG+(GG+G)");
        assert!(matches!(e, Expr::Sum(ref ops) if ops.len() == 3));
    }

    #[test]
    fn transpose_examples() {
        assert_eq!(p("GM'+G").transpose_structure().to_string(), "MG+G");
        assert_eq!(p("CG+G").transpose_structure().to_string(), "GC'+G");
        assert_eq!(p("C(GG+G)+G").transpose_structure().to_string(), "(GG+G)C'+G");
        assert_eq!(p("(exp(G)oG)G+G").transpose_structure().to_string(), "G(exp(G)oG)+G");
    }

    #[test]
    fn canonicalize_g_is_g() {
        assert_eq!(Expr::g().canonicalize(), Expr::g());
    }
}
