//! Sum-of-products normal form: `X = U1 V1 + ... + Un Vn + E`, grouping
//! terms by their leftmost row factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, Kind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermClass {
    /// A single `G`, `M` or `B` leaf.
    Plain,
    /// `order` integration matrices followed by an increment factor. The
    /// increment is normally a `G`; other increments only arise from
    /// overgenerated structures such as `C(MG+G)+G`.
    Chain { order: usize },
    /// `exp(Z)oW`.
    ScaleMixture,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Term {
    pub class: TermClass,
    /// For chains, a flat product of `C` leaves followed by the increment.
    pub row_factor: Expr,
    /// `None` stands for the identity.
    pub right: Option<Expr>,
}

impl Term {
    /// The last factor of a chain row factor, or the row factor itself.
    pub fn increment(&self) -> &Expr {
        match (&self.class, &self.row_factor) {
            (TermClass::Chain { .. }, Expr::Product(ops)) => ops.last().unwrap(),
            _ => &self.row_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SumOfProducts {
    pub terms: Vec<Term>,
    /// The additive noise leaf; `None` when the structure has none and a
    /// fixed noise floor is used instead.
    pub noise: Option<Expr>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SopError {
    #[error("{0} has no additive noise term")]
    UnsupportedForm(String),
    #[error("cannot take a row predictive for factor {0}")]
    UnsupportedRowFactor(String),
}

fn product(mut a: Vec<Expr>, b: Expr) -> Expr {
    match b {
        Expr::Product(ops) => a.extend(ops),
        other => a.push(other),
    }
    Expr::Product(a)
}

fn expand(e: &Expr) -> Result<Vec<Term>, SopError> {
    match e {
        Expr::Leaf { kind: Kind::C, .. } | Expr::Transpose(_) | Expr::Exp(_) => {
            Err(SopError::UnsupportedRowFactor(e.to_string()))
        }
        Expr::Leaf { .. } => Ok(vec![Term {
            class: TermClass::Plain,
            row_factor: e.clone(),
            right: None,
        }]),
        Expr::ElemProd(..) => Ok(vec![Term {
            class: TermClass::ScaleMixture,
            row_factor: e.clone(),
            right: None,
        }]),
        Expr::Sum(ops) => {
            let mut out = Vec::new();
            for op in ops {
                out.extend(expand(op)?);
            }
            Ok(out)
        }
        Expr::Product(ops) => {
            let rest = if ops.len() == 2 {
                ops[1].clone()
            } else {
                Expr::Product(ops[1..].to_vec())
            };
            if let Expr::Leaf { kind: Kind::C, .. } = ops[0] {
                let inner = expand(&rest)?;
                return Ok(inner
                    .into_iter()
                    .map(|t| {
                        let (order, row) = match t.class {
                            TermClass::Chain { order } => (order + 1, product(vec![ops[0].clone()], t.row_factor)),
                            _ => (1, Expr::Product(vec![ops[0].clone(), t.row_factor])),
                        };
                        Term {
                            class: TermClass::Chain { order },
                            row_factor: row,
                            right: t.right,
                        }
                    })
                    .collect());
            }
            let left = expand(&ops[0])?;
            Ok(left
                .into_iter()
                .map(|t| Term {
                    right: Some(match t.right {
                        None => rest.clone(),
                        Some(r) => product(vec![r], rest.clone()),
                    }),
                    ..t
                })
                .collect())
        }
    }
}

/// Expands a structure whose root is a sum ending in a `G` (or a single
/// `G`).
pub fn expand_sum_of_products(expr: &Expr) -> Result<SumOfProducts, SopError> {
    match expr {
        Expr::Leaf { kind: Kind::G, .. } => Ok(SumOfProducts {
            terms: Vec::new(),
            noise: Some(expr.clone()),
        }),
        Expr::Sum(ops) if ops.last().is_some_and(Expr::is_g_leaf) => {
            let mut terms = Vec::new();
            for op in &ops[..ops.len() - 1] {
                terms.extend(expand(op)?);
            }
            Ok(SumOfProducts {
                terms,
                noise: ops.last().cloned(),
            })
        }
        _ => Err(SopError::UnsupportedForm(expr.to_string())),
    }
}

/// Like [`expand_sum_of_products`] but accepts structures without additive
/// noise, returning every operand as a term and no noise leaf.
pub fn expand_for_scoring(expr: &Expr) -> Result<SumOfProducts, SopError> {
    match expand_sum_of_products(expr) {
        Ok(s) => Ok(s),
        Err(SopError::UnsupportedForm(_)) => Ok(SumOfProducts {
            terms: expand(expr)?,
            noise: None,
        }),
        Err(e) => Err(e),
    }
}
