use std::collections::BTreeMap;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::{Expr, LeafId};

pub type Binding = BTreeMap<LeafId, DMatrix<f64>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("no value bound for leaf {0}")]
    MissingLeaf(LeafId),
    #[error("shape mismatch: {0}")]
    DimensionConflict(String),
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<(), EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::DimensionConflict(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Evaluates an expression given a value for every leaf.
pub fn evaluate(expr: &Expr, binding: &Binding) -> Result<DMatrix<f64>, EvalError> {
    match expr {
        Expr::Leaf { id, .. } => binding.get(id).cloned().ok_or(EvalError::MissingLeaf(*id)),
        Expr::Transpose(inner) => Ok(evaluate(inner, binding)?.transpose()),
        Expr::Sum(ops) => {
            let mut acc = evaluate(&ops[0], binding)?;
            for op in &ops[1..] {
                let v = evaluate(op, binding)?;
                same_shape(&acc, &v, "sum operands")?;
                acc += v;
            }
            Ok(acc)
        }
        Expr::Product(ops) => {
            let mut acc = evaluate(&ops[0], binding)?;
            for op in &ops[1..] {
                let v = evaluate(op, binding)?;
                if acc.ncols() != v.nrows() {
                    return Err(EvalError::DimensionConflict(format!(
                        "product inner dimensions {} and {}",
                        acc.ncols(),
                        v.nrows()
                    )));
                }
                acc = acc * v;
            }
            Ok(acc)
        }
        Expr::ElemProd(a, b) => {
            let va = evaluate(a, binding)?;
            let vb = evaluate(b, binding)?;
            same_shape(&va, &vb, "elementwise product")?;
            Ok(va.component_mul(&vb))
        }
        Expr::Exp(inner) => Ok(evaluate(inner, binding)?.map(f64::exp)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn integration_is_cumulative_sum() {
        let e = Expr::parse("CG").unwrap();
        let mut b = Binding::new();
        b.insert(0, crate::components::integration_matrix(3));
        b.insert(1, dmatrix![1.0; 2.0; 3.0]);
        assert_eq!(evaluate(&e, &b).unwrap(), dmatrix![1.0; 3.0; 6.0]);
    }

    #[test]
    fn exp_of_zero_is_identity_scale() {
        let e = Expr::parse("exp(G)oG").unwrap();
        let mut b = Binding::new();
        b.insert(0, DMatrix::zeros(2, 2));
        let w = dmatrix![1.0, -2.0; 0.5, 3.0];
        b.insert(1, w.clone());
        assert_eq!(evaluate(&e, &b).unwrap(), w);
    }

    #[test]
    fn clustering_rows_equal_centers() {
        let e = Expr::parse("MG+G").unwrap();
        let mut b = Binding::new();
        b.insert(0, dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 0.0]);
        let centers = dmatrix![1.0, 2.0, 3.0; -1.0, -2.0, -3.0];
        b.insert(1, centers.clone());
        b.insert(2, DMatrix::zeros(3, 3));
        let x = evaluate(&e, &b).unwrap();
        assert_eq!(x.row(0), centers.row(0));
        assert_eq!(x.row(1), centers.row(1));
        assert_eq!(x.row(2), centers.row(0));
    }

    #[test]
    fn missing_and_mismatch() {
        let e = Expr::parse("GG+G").unwrap();
        let mut b = Binding::new();
        b.insert(0, DMatrix::zeros(2, 3));
        assert_eq!(evaluate(&e, &b), Err(EvalError::MissingLeaf(1)));
        b.insert(1, DMatrix::zeros(2, 2));
        b.insert(2, DMatrix::zeros(2, 2));
        assert!(matches!(evaluate(&e, &b), Err(EvalError::DimensionConflict(_))));
    }
}
