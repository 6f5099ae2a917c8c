//! Random-walk rows: `S = C G + E` with `C` the integration matrix, fitted by
//! alternating forward-filtering backward-sampling of the increments with
//! conjugate precision updates.

use nalgebra::DMatrix;

use super::gibbs::{chain_cols, Prec};
use super::init::{precision_guess, InitConfig};
use super::state::Node;
use crate::components::{integration_matrix, GaussianParams, Hyper, Params, Tying};
use crate::error::Result;
use crate::linalg::{cumsum_rows, diff_rows};
use crate::rng::Rng;

pub(crate) fn init_row_chain(s: &DMatrix<f64>, tying: Tying, hyper: &Hyper, cfg: &InitConfig, rng: &mut Rng) -> Result<Node> {
    let (n, m) = s.shape();
    let inc_guess = precision_guess(&diff_rows(s));
    let mut gp = GaussianParams::constant(n, m, inc_guess, tying);
    let mut ep = GaussianParams::constant(n, m, 10.0 * inc_guess, tying);
    let mut g = diff_rows(s);
    for _ in 0..cfg.sweeps {
        let q = Prec::Outer {
            row: gp.row.clone(),
            col: gp.col.clone(),
        };
        let p = Prec::Outer {
            row: ep.row.clone(),
            col: ep.col.clone(),
        };
        g = chain_cols(None, &q, s, &p, rng);
        gp.resample(&g, hyper, rng);
        ep.resample(&(s - cumsum_rows(&g)), hyper, rng);
    }
    let e = s - cumsum_rows(&g);
    let cnode = Node::leaf(0, integration_matrix(n), Params::Integration);
    let gnode = Node::leaf(0, g, Params::Gaussian(gp));
    let enode = Node::leaf(0, e, Params::Gaussian(ep));
    let mut node = Node::sum(vec![Node::product(cnode, gnode)], enode);
    node.value = s.clone();
    Ok(node)
}
