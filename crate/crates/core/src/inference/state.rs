//! Fitted decompositions as value-annotated trees.
//!
//! Every node caches the value of its sub-expression. Sums own their noise
//! explicitly so that `sum.value == terms + noise` holds exactly; a sum
//! without a trailing `G` gets a fixed-precision floor instead.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::components::{ComponentMatrix, GaussianParams, Params, Tying};
use crate::dims::{infer_dims, DimensionAssignment};
use crate::error::{Error, Result};
use crate::eval::Binding;
use crate::expr::{Expr, Kind, LeafId};
use crate::grammar::Step;

/// Precision of the synthetic noise used by sums without additive `G`
/// (variance 1e-6).
pub const FLOOR_PRECISION: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub value: DMatrix<f64>,
    pub body: Body,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Body {
    Leaf { id: LeafId, params: Params },
    /// Fixed-precision noise with no prior parameters.
    Floor,
    Sum { terms: Vec<Node>, noise: Box<Node> },
    Product(Box<Node>, Box<Node>),
    Transpose(Box<Node>),
    /// `exp(log_scale) o coef`.
    ElemProd { log_scale: Box<Node>, coef: Box<Node> },
}

impl Node {
    pub fn leaf(id: LeafId, value: DMatrix<f64>, params: Params) -> Node {
        Node {
            value,
            body: Body::Leaf { id, params },
        }
    }

    pub fn floor(rows: usize, cols: usize) -> Node {
        Node {
            value: DMatrix::zeros(rows, cols),
            body: Body::Floor,
        }
    }

    pub fn sum(terms: Vec<Node>, noise: Node) -> Node {
        let mut value = noise.value.clone();
        for t in &terms {
            value += &t.value;
        }
        Node {
            value,
            body: Body::Sum {
                terms,
                noise: Box::new(noise),
            },
        }
    }

    pub fn product(a: Node, b: Node) -> Node {
        Node {
            value: &a.value * &b.value,
            body: Body::Product(Box::new(a), Box::new(b)),
        }
    }

    pub fn transpose(child: Node) -> Node {
        Node {
            value: child.value.transpose(),
            body: Body::Transpose(Box::new(child)),
        }
    }

    pub fn elem_prod(log_scale: Node, coef: Node) -> Node {
        let value = log_scale.value.map(f64::exp).component_mul(&coef.value);
        Node {
            value,
            body: Body::ElemProd {
                log_scale: Box::new(log_scale),
                coef: Box::new(coef),
            },
        }
    }

    pub fn kind(&self) -> Option<Kind> {
        match &self.body {
            Body::Leaf { params, .. } => Some(params.kind()),
            _ => None,
        }
    }

    pub fn is_integration(&self) -> bool {
        match &self.body {
            Body::Leaf { params, .. } => matches!(params, Params::Integration),
            Body::Transpose(c) => c.is_integration(),
            _ => false,
        }
    }

    pub fn gaussian_params(&self) -> Option<&GaussianParams> {
        match &self.body {
            Body::Leaf {
                params: Params::Gaussian(g),
                ..
            } => Some(g),
            _ => None,
        }
    }

    /// Recomputes this node's value from its children. Sums are left alone:
    /// their value is authoritative and the noise absorbs changes.
    pub fn refresh(&mut self) {
        match &self.body {
            Body::Product(a, b) => self.value = &a.value * &b.value,
            Body::Transpose(c) => self.value = c.value.transpose(),
            Body::ElemProd { log_scale, coef } => {
                self.value = log_scale.value.map(f64::exp).component_mul(&coef.value)
            }
            _ => {}
        }
    }

    /// Recomputes every cached value bottom-up, sums included.
    pub fn recompute(&mut self) {
        match &mut self.body {
            Body::Leaf { .. } | Body::Floor => {}
            Body::Sum { terms, noise } => {
                noise.recompute();
                let mut v = noise.value.clone();
                for t in terms.iter_mut() {
                    t.recompute();
                    v += &t.value;
                }
                self.value = v;
            }
            Body::Product(a, b) => {
                a.recompute();
                b.recompute();
            }
            Body::Transpose(c) => c.recompute(),
            Body::ElemProd { log_scale, coef } => {
                log_scale.recompute();
                coef.recompute();
            }
        }
        self.refresh();
    }

    /// Adds `delta` to this node's value by shifting one additive Gaussian
    /// part; false when there is none.
    fn absorb(&mut self, delta: &DMatrix<f64>) -> bool {
        let ok = match &mut self.body {
            Body::Leaf {
                params: Params::Gaussian(_),
                ..
            } => true,
            Body::Sum { terms, noise } => match noise.body {
                Body::Floor => terms.last_mut().is_some_and(|t| t.absorb(delta)),
                _ => noise.absorb(delta),
            },
            Body::ElemProd { log_scale, coef } => coef.absorb(&delta.component_div(&log_scale.value.map(f64::exp))),
            _ => false,
        };
        if ok {
            match self.body {
                Body::ElemProd { .. } => self.refresh(),
                _ => self.value += delta,
            }
        }
        ok
    }

    /// Moves the residual held by every noise-free sum into that sum's last
    /// term, so the structure alone reproduces each sum's value.
    pub fn absorb_floors(&mut self) {
        match &mut self.body {
            Body::Leaf { .. } | Body::Floor => {}
            Body::Sum { terms, noise } => {
                for t in terms.iter_mut() {
                    t.absorb_floors();
                }
                if matches!(noise.body, Body::Floor) {
                    let delta = noise.value.clone();
                    if terms.last_mut().is_some_and(|t| t.absorb(&delta)) {
                        noise.value.fill(0.0);
                    }
                } else {
                    noise.absorb_floors();
                }
            }
            Body::Product(a, b) => {
                a.absorb_floors();
                b.absorb_floors();
            }
            Body::Transpose(c) => c.absorb_floors(),
            Body::ElemProd { log_scale, coef } => {
                log_scale.absorb_floors();
                coef.absorb_floors();
            }
        }
    }

    pub fn to_expr(&self) -> Expr {
        match &self.body {
            Body::Leaf { id, params } => Expr::Leaf {
                kind: params.kind(),
                id: *id,
            },
            Body::Floor => unreachable!("floor noise has no expression"),
            Body::Sum { terms, noise } => {
                let mut ops: Vec<Expr> = terms.iter().map(Node::to_expr).collect();
                if !matches!(noise.body, Body::Floor) {
                    ops.push(noise.to_expr());
                }
                if ops.len() == 1 {
                    ops.pop().unwrap()
                } else {
                    Expr::Sum(ops)
                }
            }
            Body::Product(a, b) => Expr::Product(vec![a.to_expr(), b.to_expr()]),
            Body::Transpose(c) => Expr::Transpose(Box::new(c.to_expr())),
            Body::ElemProd { log_scale, coef } => Expr::ElemProd(
                Box::new(Expr::Exp(Box::new(log_scale.to_expr()))),
                Box::new(coef.to_expr()),
            ),
        }
    }

    /// The node modelling the transposed matrix.
    pub fn transposed(self) -> Node {
        let value = self.value.transpose();
        let body = match self.body {
            Body::Leaf { id, params } => match params {
                Params::Gaussian(g) => Body::Leaf {
                    id,
                    params: Params::Gaussian(g.transposed()),
                },
                other => {
                    return Node::transpose(Node {
                        value: self.value,
                        body: Body::Leaf { id, params: other },
                    })
                }
            },
            Body::Floor => Body::Floor,
            Body::Sum { terms, noise } => Body::Sum {
                terms: terms.into_iter().map(Node::transposed).collect(),
                noise: Box::new(noise.transposed()),
            },
            Body::Product(a, b) => Body::Product(Box::new(b.transposed()), Box::new(a.transposed())),
            Body::Transpose(c) => return *c,
            Body::ElemProd { log_scale, coef } => Body::ElemProd {
                log_scale: Box::new(log_scale.transposed()),
                coef: Box::new(coef.transposed()),
            },
        };
        Node { value, body }
    }

    pub fn for_each_leaf<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        match &self.body {
            Body::Leaf { .. } => f(self),
            Body::Floor => {}
            Body::Sum { terms, noise } => {
                for t in terms {
                    t.for_each_leaf(f);
                }
                noise.for_each_leaf(f);
            }
            Body::Product(a, b) => {
                a.for_each_leaf(f);
                b.for_each_leaf(f);
            }
            Body::Transpose(c) => c.for_each_leaf(f),
            Body::ElemProd { log_scale, coef } => {
                log_scale.for_each_leaf(f);
                coef.for_each_leaf(f);
            }
        }
    }

    pub fn for_each_leaf_mut(&mut self, f: &mut impl FnMut(&mut Node)) {
        match &mut self.body {
            Body::Leaf { .. } => f(self),
            Body::Floor => {}
            Body::Sum { terms, noise } => {
                for t in terms {
                    t.for_each_leaf_mut(f);
                }
                noise.for_each_leaf_mut(f);
            }
            Body::Product(a, b) => {
                a.for_each_leaf_mut(f);
                b.for_each_leaf_mut(f);
            }
            Body::Transpose(c) => c.for_each_leaf_mut(f),
            Body::ElemProd { log_scale, coef } => {
                log_scale.for_each_leaf_mut(f);
                coef.for_each_leaf_mut(f);
            }
        }
    }

    pub fn renumber(&mut self) {
        let mut next = 0;
        self.for_each_leaf_mut(&mut |n| {
            if let Body::Leaf { id, .. } = &mut n.body {
                *id = next;
                next += 1;
            }
        });
    }

    fn leaf_id(&self) -> Option<LeafId> {
        match &self.body {
            Body::Leaf { id, .. } => Some(*id),
            Body::Transpose(c) => c.leaf_id().filter(|_| matches!(c.body, Body::Leaf { .. })),
            _ => None,
        }
    }

    /// Replaces the leaf (or transposed leaf) with the given id, returning
    /// whether it was found. Cached values above the site are not touched;
    /// the replacement must evaluate to the same matrix.
    fn replace_site(&mut self, site: LeafId, replacement: &mut Option<Node>) -> bool {
        if self.leaf_id() == Some(site) {
            *self = replacement.take().expect("replacement used once");
            return true;
        }
        match &mut self.body {
            Body::Leaf { .. } | Body::Floor => false,
            Body::Sum { terms, noise } => {
                terms.iter_mut().any(|t| t.replace_site(site, replacement))
                    || noise.replace_site(site, replacement)
            }
            Body::Product(a, b) => a.replace_site(site, replacement) || b.replace_site(site, replacement),
            Body::Transpose(c) => c.replace_site(site, replacement),
            Body::ElemProd { log_scale, coef } => {
                log_scale.replace_site(site, replacement) || coef.replace_site(site, replacement)
            }
        }
    }

    /// Restores the canonical shape after a splice: nested sums are merged
    /// into their parent and a non-leaf noise becomes a term with a floor.
    fn flatten(&mut self) {
        match &mut self.body {
            Body::Leaf { .. } | Body::Floor => {}
            Body::Sum { terms, noise } => {
                for t in terms.iter_mut() {
                    t.flatten();
                }
                noise.flatten();
                let mut flat = Vec::with_capacity(terms.len());
                for t in terms.drain(..) {
                    match t.body {
                        Body::Sum {
                            terms: inner,
                            noise: inner_noise,
                        } => {
                            flat.extend(inner);
                            if !matches!(inner_noise.body, Body::Floor) {
                                flat.push(*inner_noise);
                            }
                        }
                        _ => flat.push(t),
                    }
                }
                let (rows, cols) = noise.value.shape();
                let old_noise = std::mem::replace(noise.as_mut(), Node::floor(rows, cols));
                match old_noise.body {
                    Body::Sum {
                        terms: inner,
                        noise: inner_noise,
                    } => {
                        flat.extend(inner);
                        **noise = *inner_noise;
                    }
                    Body::Leaf {
                        params: Params::Gaussian(_),
                        ..
                    }
                    | Body::Floor => **noise = old_noise,
                    _ => {
                        // Any residual mismatch is absorbed by the floor.
                        let mut floor = Node::floor(rows, cols);
                        floor.value = DMatrix::zeros(rows, cols);
                        flat.push(old_noise);
                        **noise = floor;
                    }
                }
                *terms = flat;
            }
            Body::Product(a, b) => {
                a.flatten();
                b.flatten();
            }
            Body::Transpose(c) => c.flatten(),
            Body::ElemProd { log_scale, coef } => {
                log_scale.flatten();
                coef.flatten();
            }
        }
    }

    /// Builds a tree from an expression and a binding of every leaf.
    pub fn from_expr(expr: &Expr, leaves: &BTreeMap<LeafId, ComponentMatrix>) -> Result<Node> {
        Ok(match expr {
            Expr::Leaf { id, .. } => {
                let c = leaves.get(id).ok_or(crate::eval::EvalError::MissingLeaf(*id))?;
                Node::leaf(*id, c.value.clone(), c.params.clone())
            }
            Expr::Sum(ops) => {
                let last = ops.last().unwrap();
                if last.is_g_leaf() {
                    let terms = ops[..ops.len() - 1]
                        .iter()
                        .map(|o| Node::from_expr(o, leaves))
                        .collect::<Result<Vec<_>>>()?;
                    let noise = Node::from_expr(last, leaves)?;
                    check_sum(&terms, &noise.value)?;
                    Node::sum(terms, noise)
                } else {
                    let terms = ops
                        .iter()
                        .map(|o| Node::from_expr(o, leaves))
                        .collect::<Result<Vec<_>>>()?;
                    let (r, c) = terms[0].value.shape();
                    check_sum(&terms, &terms[0].value)?;
                    Node::sum(terms, Node::floor(r, c))
                }
            }
            Expr::Product(ops) => {
                if ops.len() != 2 {
                    return Err(Error::InvalidInput(format!("unsupported product arity in {expr}")));
                }
                let a = Node::from_expr(&ops[0], leaves)?;
                let b = Node::from_expr(&ops[1], leaves)?;
                if a.value.ncols() != b.value.nrows() {
                    return Err(crate::eval::EvalError::DimensionConflict(format!("product in {expr}")).into());
                }
                Node::product(a, b)
            }
            Expr::Transpose(inner) => Node::transpose(Node::from_expr(inner, leaves)?),
            Expr::ElemProd(a, b) => {
                let Expr::Exp(z) = a.as_ref() else {
                    return Err(Error::InvalidInput(format!("elementwise product without exp in {expr}")));
                };
                let z = Node::from_expr(z, leaves)?;
                let w = Node::from_expr(b, leaves)?;
                if z.value.shape() != w.value.shape() {
                    return Err(crate::eval::EvalError::DimensionConflict(format!("elementwise product in {expr}")).into());
                }
                Node::elem_prod(z, w)
            }
            Expr::Exp(_) => return Err(Error::InvalidInput(format!("bare exp in {expr}"))),
        })
    }
}

fn check_sum(terms: &[Node], like: &DMatrix<f64>) -> Result<()> {
    for t in terms {
        if t.value.shape() != like.shape() {
            return Err(crate::eval::EvalError::DimensionConflict("sum operands".into()).into());
        }
    }
    Ok(())
}

/// A fitted decomposition: the value tree plus the derivation that built it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Always a sum whose value is the (imputed) data matrix.
    pub root: Node,
    pub derivation: Vec<Step>,
}

impl State {
    /// Wraps a tree as a root sum.
    pub fn from_root(node: Node, derivation: Vec<Step>) -> State {
        let root = match node.body {
            Body::Sum { .. } => node,
            Body::Leaf {
                params: Params::Gaussian(_),
                ..
            } => Node::sum(Vec::new(), node),
            _ => {
                let (r, c) = node.value.shape();
                Node::sum(vec![node], Node::floor(r, c))
            }
        };
        State { root, derivation }
    }

    pub fn from_expr(expr: &Expr, leaves: &BTreeMap<LeafId, ComponentMatrix>) -> Result<State> {
        let node = Node::from_expr(expr, leaves)?;
        Ok(State::from_root(node, Vec::new()))
    }

    /// The structure `G` with noise precision `precision` fitted to `x`.
    pub fn structureless(x: DMatrix<f64>, precision: f64) -> State {
        let (n, d) = x.shape();
        let params = Params::Gaussian(GaussianParams::constant(n, d, precision, Tying::DATA));
        State::from_root(Node::leaf(0, x, params), Vec::new())
    }

    pub fn expr(&self) -> Expr {
        self.root.to_expr()
    }

    pub fn value(&self) -> &DMatrix<f64> {
        &self.root.value
    }

    pub fn binding(&self) -> Binding {
        let mut b = Binding::new();
        self.root.for_each_leaf(&mut |n| {
            if let Body::Leaf { id, .. } = &n.body {
                b.insert(*id, n.value.clone());
            }
        });
        b
    }

    pub fn components(&self) -> BTreeMap<LeafId, ComponentMatrix> {
        let mut out = BTreeMap::new();
        self.root.for_each_leaf(&mut |n| {
            if let Body::Leaf { id, params } = &n.body {
                out.insert(
                    *id,
                    ComponentMatrix {
                        value: n.value.clone(),
                        params: params.clone(),
                    },
                );
            }
        });
        out
    }

    pub fn leaf(&self, id: LeafId) -> Option<&Node> {
        let mut found = None;
        self.root.for_each_leaf(&mut |n| {
            if matches!(n.body, Body::Leaf { id: lid, .. } if lid == id) {
                found = Some(n);
            }
        });
        found
    }

    pub fn noise(&self) -> &Node {
        match &self.root.body {
            Body::Sum { noise, .. } => noise,
            _ => unreachable!("root is always a sum"),
        }
    }

    /// Precision of the root additive noise, `FLOOR_PRECISION` when the
    /// structure has none. Data-side precisions are tied, so one entry
    /// suffices.
    pub fn noise_precision(&self) -> f64 {
        match self.noise().gaussian_params() {
            Some(g) => g.row[0] * g.col[0],
            None => FLOOR_PRECISION,
        }
    }

    /// The state of the transposed model over the transposed matrix.
    pub fn transposed(&self) -> State {
        let mut root = self.root.clone().transposed();
        root.renumber();
        State {
            root,
            derivation: Vec::new(),
        }
    }

    /// Replaces leaf `site` with a subtree evaluating to the same matrix and
    /// restores canonical numbering.
    pub fn splice(&mut self, site: LeafId, replacement: Node, step: Step) -> Result<()> {
        let mut slot = Some(replacement);
        if !self.root.replace_site(site, &mut slot) {
            return Err(Error::InvalidInput(format!("no leaf {site} in {}", self.expr())));
        }
        self.root.flatten();
        self.root.renumber();
        self.derivation.push(step);
        Ok(())
    }

    /// Dimension assignment of the current leaf shapes.
    pub fn dims(&self) -> Result<DimensionAssignment> {
        let mut sizes = crate::dims::LatentSizes::default();
        self.root.for_each_leaf(&mut |n| {
            if let Body::Leaf { id, .. } = &n.body {
                sizes.declared.insert(*id, n.value.shape());
            }
        });
        let (r, c) = self.root.value.shape();
        Ok(infer_dims(&self.expr(), r, c, &sizes)?)
    }

    /// Tying flags of every leaf implied by the structure's dimensions.
    pub fn tying(&self) -> Result<BTreeMap<LeafId, Tying>> {
        let dims = self.dims()?;
        Ok(dims
            .vars
            .keys()
            .map(|&id| {
                let (rows, cols) = dims.data_sides(id);
                (id, Tying { rows, cols })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::{sample_component, Hyper};
    use crate::rng::seeded;

    pub(crate) fn random_state(text: &str, n: usize, d: usize, k: usize, seed: u64) -> State {
        let expr = Expr::parse(text).unwrap();
        let dims = infer_dims(&expr, n, d, &crate::dims::LatentSizes::uniform(k)).unwrap();
        let mut rng = seeded(seed);
        let mut leaves = BTreeMap::new();
        for l in expr.leaves() {
            let (r, c) = dims.shape(l.id).unwrap();
            let (tr, tc) = dims.data_sides(l.id);
            let comp = sample_component(l.kind, r, c, Tying { rows: tr, cols: tc }, &Hyper::default(), &mut rng).unwrap();
            leaves.insert(l.id, comp);
        }
        State::from_expr(&expr, &leaves).unwrap()
    }

    #[test]
    fn round_trips_expressions() {
        for text in ["G", "GG+G", "M(GM'+G)+G", "(exp(GG+G)oG)G+G", "exp(G)oG", "GG+exp(G)oG", "(CG+G)G+G"] {
            let s = random_state(text, 6, 5, 2, 1);
            assert_eq!(s.expr().to_string(), text);
            let v = crate::eval::evaluate(&s.expr(), &s.binding()).unwrap();
            assert!(crate::linalg::relative_error(&v, s.value()) < 1e-12);
        }
    }

    #[test]
    fn transposed_state_matches_transposed_structure() {
        for text in ["GM'+G", "M(GM'+G)+G", "CG+G", "(exp(G)oG)G+G"] {
            let s = random_state(text, 6, 5, 2, 2);
            let t = s.transposed();
            assert_eq!(t.expr(), s.expr().transpose_structure());
            let v = crate::eval::evaluate(&t.expr(), &t.binding()).unwrap();
            assert!(crate::linalg::relative_error(&v, &s.value().transpose()) < 1e-12);
        }
    }

    #[test]
    fn splice_into_noise_flattens() {
        let mut s = random_state("GG+G", 4, 3, 2, 3);
        let noise = s.noise().value.clone();
        let params = Params::Gaussian(GaussianParams::constant(4, 3, 1.0, Tying::DATA));
        let half = &noise * 0.5;
        let replacement = Node::sum(
            vec![Node::leaf(0, half.clone(), params.clone())],
            Node::leaf(0, &noise - &half, params),
        );
        let step = Step {
            rule: crate::grammar::Rule::LowRank,
            site: 2,
        };
        s.splice(2, replacement, step).unwrap();
        assert_eq!(s.expr().to_string(), "GG+G+G");
        let v = crate::eval::evaluate(&s.expr(), &s.binding()).unwrap();
        assert!(crate::linalg::relative_error(&v, s.value()) < 1e-12);
    }
}
