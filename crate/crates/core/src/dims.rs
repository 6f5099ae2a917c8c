//! Shape inference for structures.
//!
//! Every leaf contributes a row slot and a column slot. Products, sums,
//! transposes and elementwise operations equate slots; the root equates its
//! slots with the data dimensions. Remaining classes are latent dimensions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, Kind, LeafId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DimsError {
    #[error("inconsistent dimensions: {0}")]
    DimensionConflict(String),
    #[error("no size given for latent dimension of leaf {0}")]
    MissingLatent(LeafId),
}

/// Which dimension a leaf side is bound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DimVar {
    Rows,
    Cols,
    Latent(u32),
}

impl DimVar {
    pub fn is_data(self) -> bool {
        !matches!(self, DimVar::Latent(_))
    }
}

/// Requested sizes: explicit leaf shapes plus a default for every latent
/// dimension not pinned by a declared leaf.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSizes {
    pub default: Option<usize>,
    pub declared: BTreeMap<LeafId, (usize, usize)>,
}

impl LatentSizes {
    pub fn uniform(k: usize) -> Self {
        LatentSizes {
            default: Some(k),
            declared: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionAssignment {
    pub n: usize,
    pub d: usize,
    pub leaves: BTreeMap<LeafId, (usize, usize)>,
    pub vars: BTreeMap<LeafId, (DimVar, DimVar)>,
    /// Size of each latent variable, indexed by `DimVar::Latent`.
    pub latent: Vec<usize>,
}

impl DimensionAssignment {
    pub fn shape(&self, id: LeafId) -> Option<(usize, usize)> {
        self.leaves.get(&id).copied()
    }

    /// `(rows are data, cols are data)` for a leaf.
    pub fn data_sides(&self, id: LeafId) -> (bool, bool) {
        let (r, c) = self.vars[&id];
        (r.is_data(), c.is_data())
    }
}

const ROOT_ROW: usize = 0;
const ROOT_COL: usize = 1;

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut y = x;
        while self.parent[y] != r {
            let next = self.parent[y];
            self.parent[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Keep the smaller index as root so root slots stay representatives.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

struct Slots {
    uf: UnionFind,
    index: BTreeMap<LeafId, usize>,
}

impl Slots {
    fn leaf_slots(&self, id: LeafId) -> (usize, usize) {
        let i = self.index[&id];
        (2 + 2 * i, 3 + 2 * i)
    }

    fn visit(&mut self, e: &Expr) -> (usize, usize) {
        match e {
            Expr::Leaf { kind, id } => {
                let (r, c) = self.leaf_slots(*id);
                if *kind == Kind::C {
                    self.uf.union(r, c);
                }
                (r, c)
            }
            Expr::Transpose(inner) => {
                let (r, c) = self.visit(inner);
                (c, r)
            }
            Expr::Sum(ops) => {
                let first = self.visit(&ops[0]);
                for op in &ops[1..] {
                    let s = self.visit(op);
                    self.uf.union(first.0, s.0);
                    self.uf.union(first.1, s.1);
                }
                first
            }
            Expr::Product(ops) => {
                let first = self.visit(&ops[0]);
                let mut last = first;
                for op in &ops[1..] {
                    let s = self.visit(op);
                    self.uf.union(last.1, s.0);
                    last = s;
                }
                (first.0, last.1)
            }
            Expr::ElemProd(a, b) => {
                let sa = self.visit(a);
                let sb = self.visit(b);
                self.uf.union(sa.0, sb.0);
                self.uf.union(sa.1, sb.1);
                sa
            }
            Expr::Exp(inner) => self.visit(inner),
        }
    }
}

/// Assigns a shape to every leaf so that the root is `n x d`.
pub fn infer_dims(expr: &Expr, n: usize, d: usize, latent: &LatentSizes) -> Result<DimensionAssignment, DimsError> {
    if n == 0 || d == 0 {
        return Err(DimsError::DimensionConflict("data dimensions must be positive".into()));
    }
    let leaves = expr.leaves();
    let index: BTreeMap<LeafId, usize> = leaves.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
    if index.len() != leaves.len() {
        return Err(DimsError::DimensionConflict("duplicate leaf ids".into()));
    }
    let n_slots = 2 + 2 * leaves.len();
    let mut slots = Slots {
        uf: UnionFind {
            parent: (0..n_slots).collect(),
        },
        index,
    };
    let (r, c) = slots.visit(expr);
    slots.uf.union(ROOT_ROW, r);
    slots.uf.union(ROOT_COL, c);

    let root_row = slots.uf.find(ROOT_ROW);
    let root_col = slots.uf.find(ROOT_COL);
    if root_row == root_col && n != d {
        return Err(DimsError::DimensionConflict(format!(
            "{expr} forces a square matrix but data is {n}x{d}"
        )));
    }

    let mut size: BTreeMap<usize, usize> = BTreeMap::new();
    size.insert(root_row, n);
    size.insert(root_col, d);
    for (&id, &(rows, cols)) in &latent.declared {
        if !slots.index.contains_key(&id) {
            continue;
        }
        let (rs, cs) = slots.leaf_slots(id);
        for (slot, want) in [(rs, rows), (cs, cols)] {
            let class = slots.uf.find(slot);
            match size.get(&class) {
                Some(&have) if have != want => {
                    return Err(DimsError::DimensionConflict(format!(
                        "leaf {id} declared {rows}x{cols} conflicts with size {have}"
                    )))
                }
                _ => {
                    size.insert(class, want);
                }
            }
        }
    }

    let mut var_of_class: BTreeMap<usize, DimVar> = BTreeMap::new();
    var_of_class.insert(root_row, DimVar::Rows);
    var_of_class.insert(root_col, DimVar::Cols);
    let mut latent_sizes = Vec::new();
    let mut out_leaves = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for l in &leaves {
        let (rs, cs) = slots.leaf_slots(l.id);
        let mut pair = [DimVar::Rows; 2];
        let mut shape = [0usize; 2];
        for (k, slot) in [rs, cs].into_iter().enumerate() {
            let class = slots.uf.find(slot);
            let var = match var_of_class.get(&class) {
                Some(v) => *v,
                None => {
                    let s = match size.get(&class) {
                        Some(&s) => s,
                        None => match latent.default {
                            Some(0) => return Err(DimsError::DimensionConflict("latent size must be positive".into())),
                            Some(s) => s,
                            None => return Err(DimsError::MissingLatent(l.id)),
                        },
                    };
                    size.insert(class, s);
                    let v = DimVar::Latent(latent_sizes.len() as u32);
                    latent_sizes.push(s);
                    var_of_class.insert(class, v);
                    v
                }
            };
            pair[k] = var;
            shape[k] = size[&class];
        }
        out_leaves.insert(l.id, (shape[0], shape[1]));
        vars.insert(l.id, (pair[0], pair[1]));
    }
    Ok(DimensionAssignment {
        n,
        d,
        leaves: out_leaves,
        vars,
        latent: latent_sizes,
    })
}
