//! Structure-generic Gibbs sweeps.
//!
//! Each node is updated given a likelihood context describing how its value
//! enters the data: directly, as the left or right factor of a product, or
//! through an arbitrary row- or column-separable log-likelihood (used below
//! `exp`). Gaussian-valued nodes are sampled blockwise by rows, chains under
//! an integration matrix by forward-filtering backward-sampling, and binary
//! or one-hot leaves by single-site updates.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::state::{Body, Node, State, FLOOR_PRECISION};
use super::Mask;
use crate::components::{one_hot_index, Hyper, Params};
use crate::error::{Error, Result};
use crate::linalg::{elliptical_slice, sample_bit, sample_from_precision, sample_log_weights, std_normal_vec};
use crate::rng::Rng;

/// Entrywise likelihood precisions.
#[derive(Clone, Debug)]
pub(crate) enum Prec {
    Outer { row: DVector<f64>, col: DVector<f64> },
    Full(DMatrix<f64>),
}

impl Prec {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        match self {
            Prec::Outer { row, col } => row[i] * col[j],
            Prec::Full(p) => p[(i, j)],
        }
    }

    pub fn t(&self) -> Prec {
        match self {
            Prec::Outer { row, col } => Prec::Outer {
                row: col.clone(),
                col: row.clone(),
            },
            Prec::Full(p) => Prec::Full(p.transpose()),
        }
    }

    pub fn full(&self) -> DMatrix<f64> {
        match self {
            Prec::Outer { row, col } => row * col.transpose(),
            Prec::Full(p) => p.clone(),
        }
    }

    /// Precision of a noise node: its Gaussian parameters, or the floor.
    pub fn of_noise(noise: &Node) -> Prec {
        match noise.gaussian_params() {
            Some(g) => Prec::Outer {
                row: g.row.clone(),
                col: g.col.clone(),
            },
            None => {
                let (r, c) = noise.value.shape();
                Prec::Outer {
                    row: DVector::from_element(r, FLOOR_PRECISION),
                    col: DVector::from_element(c, 1.0),
                }
            }
        }
    }
}

/// `target ~ N((scale o V) design, 1/prec)` for `Left`, or
/// `target ~ N(design (scale o V), 1/prec)` for `Right`.
#[derive(Clone)]
pub(crate) struct Lin {
    pub target: DMatrix<f64>,
    pub prec: Prec,
    pub design: DMatrix<f64>,
    pub scale: Option<DMatrix<f64>>,
    /// The design is an integration matrix placed so that the rows of `V`
    /// (for `Right`) or its columns (for `Left`) form random walks.
    pub chain: bool,
}

impl Lin {
    fn t(&self) -> Lin {
        Lin {
            target: self.target.transpose(),
            prec: self.prec.t(),
            design: self.design.transpose(),
            scale: self.scale.as_ref().map(|s| s.transpose()),
            chain: self.chain,
        }
    }

    fn scale_at(&self, i: usize, j: usize) -> f64 {
        self.scale.as_ref().map_or(1.0, |s| s[(i, j)])
    }
}

pub(crate) type RowLik<'a> = &'a dyn Fn(usize, &DVector<f64>) -> f64;

pub(crate) enum Ctx<'a> {
    Direct { target: DMatrix<f64>, prec: Prec },
    Left(Lin),
    Right(Lin),
    /// Log-likelihood of each row of the node value.
    Rows(RowLik<'a>),
    /// Log-likelihood of each column of the node value.
    Cols(RowLik<'a>),
}

impl<'a> Ctx<'a> {
    fn t(&self) -> Ctx<'a> {
        match self {
            Ctx::Direct { target, prec } => Ctx::Direct {
                target: target.transpose(),
                prec: prec.t(),
            },
            Ctx::Left(l) => Ctx::Right(l.t()),
            Ctx::Right(l) => Ctx::Left(l.t()),
            Ctx::Rows(f) => Ctx::Cols(*f),
            Ctx::Cols(f) => Ctx::Rows(*f),
        }
    }
}

fn row_vec(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

/// Draws a Gaussian-valued matrix with prior `N(mean, 1/q)` under `ctx`.
pub(crate) fn sample_gaussian(
    mean: Option<&DMatrix<f64>>,
    q: &Prec,
    current: &DMatrix<f64>,
    ctx: &Ctx,
    rng: &mut Rng,
) -> Result<DMatrix<f64>> {
    let (n, k) = current.shape();
    if n == 0 || k == 0 {
        return Ok(current.clone());
    }
    let mu = |i: usize, j: usize| mean.map_or(0.0, |m| m[(i, j)]);
    match ctx {
        Ctx::Direct { target, prec } => Ok(DMatrix::from_fn(n, k, |i, j| {
            let (a, b) = (q.at(i, j), prec.at(i, j));
            let post = a + b;
            let m = (a * mu(i, j) + b * target[(i, j)]) / post;
            let z: f64 = StandardNormal.sample(rng);
            m + z / post.sqrt()
        })),
        Ctx::Left(l) if l.chain && l.scale.is_none() => {
            let mt = mean.map(|m| m.transpose());
            let l = l.t();
            Ok(chain_cols(mt.as_ref(), &q.t(), &l.target, &l.prec, rng).transpose())
        }
        Ctx::Left(l) => gaussian_rows(mean, q, l, rng),
        Ctx::Right(l) if l.chain && l.scale.is_none() => Ok(chain_cols(mean, q, &l.target, &l.prec, rng)),
        Ctx::Right(l) => {
            let mt = mean.map(|m| m.transpose());
            Ok(gaussian_rows(mt.as_ref(), &q.t(), &l.t(), rng)?.transpose())
        }
        Ctx::Rows(f) => Ok(ess_rows(mean, q, current, *f, rng)),
        Ctx::Cols(f) => {
            let mt = mean.map(|m| m.transpose());
            Ok(ess_rows(mt.as_ref(), &q.t(), &current.transpose(), *f, rng).transpose())
        }
    }
}

/// Per-row conditional Gaussians for `target ~ (scale o V) design`.
fn gaussian_rows(mean: Option<&DMatrix<f64>>, q: &Prec, l: &Lin, rng: &mut Rng) -> Result<DMatrix<f64>> {
    let n = l.target.nrows();
    let k = l.design.nrows();
    let bt = l.design.transpose();
    let mut out = DMatrix::zeros(n, k);
    let (y, k0) = match &l.prec {
        Prec::Outer { col, .. } => {
            let mut rc = l.target.clone();
            let mut bd = l.design.clone();
            for j in 0..col.len() {
                rc.column_mut(j).scale_mut(col[j]);
                bd.column_mut(j).scale_mut(col[j]);
            }
            (&rc * &bt, Some(&bd * &bt))
        }
        Prec::Full(p) => (l.target.component_mul(p) * &bt, None),
    };
    for i in 0..n {
        let mut lam = match (&k0, &l.prec) {
            (Some(k0), Prec::Outer { row, .. }) => k0 * row[i],
            (_, Prec::Full(p)) => {
                let mut bd = l.design.clone();
                for j in 0..p.ncols() {
                    bd.column_mut(j).scale_mut(p[(i, j)]);
                }
                &bd * &bt
            }
            _ => unreachable!(),
        };
        let mut h = match &l.prec {
            Prec::Outer { row, .. } => row_vec(&y, i) * row[i],
            Prec::Full(_) => row_vec(&y, i),
        };
        if let Some(s) = &l.scale {
            for a in 0..k {
                h[a] *= s[(i, a)];
                for b in 0..k {
                    lam[(a, b)] *= s[(i, a)] * s[(i, b)];
                }
            }
        }
        for c in 0..k {
            let qc = q.at(i, c);
            lam[(c, c)] += qc;
            h[c] += qc * mean.map_or(0.0, |m| m[(i, c)]);
        }
        let v = sample_from_precision(&lam, &h, rng)?;
        out.row_mut(i).copy_from(&v.transpose());
    }
    Ok(out)
}

/// Forward-filtering backward-sampling of increments `V` when
/// `target ~ N(cumsum(V), 1/prec)` column by column and `V ~ N(mean, 1/q)`.
pub(crate) fn chain_cols(
    mean: Option<&DMatrix<f64>>,
    q: &Prec,
    target: &DMatrix<f64>,
    prec: &Prec,
    rng: &mut Rng,
) -> DMatrix<f64> {
    let (t_len, m) = target.shape();
    let mut out = DMatrix::zeros(t_len, m);
    if t_len == 0 {
        return out;
    }
    let mut fm = vec![0.0; t_len];
    let mut fv = vec![0.0; t_len];
    for j in 0..m {
        let (mut pm, mut pv) = (0.0, 0.0);
        for t in 0..t_len {
            let mu = mean.map_or(0.0, |x| x[(t, j)]);
            let m_pred = pm + mu;
            let v_pred = pv + 1.0 / q.at(t, j);
            let obs_var = 1.0 / prec.at(t, j);
            let gain = v_pred / (v_pred + obs_var);
            fm[t] = m_pred + gain * (target[(t, j)] - m_pred);
            fv[t] = (1.0 - gain) * v_pred;
            pm = fm[t];
            pv = fv[t];
        }
        let mut next = 0.0;
        for t in (0..t_len).rev() {
            let (m_t, v_t) = if t + 1 == t_len {
                (fm[t], fv[t])
            } else {
                let qn = q.at(t + 1, j);
                let mun = mean.map_or(0.0, |x| x[(t + 1, j)]);
                let v = 1.0 / (1.0 / fv[t] + qn);
                (v * (fm[t] / fv[t] + qn * (next - mun)), v)
            };
            let z: f64 = StandardNormal.sample(rng);
            let x = m_t + z * v_t.sqrt();
            if t + 1 < t_len {
                out[(t + 1, j)] = next - x;
            }
            next = x;
        }
        out[(0, j)] = next;
    }
    out
}

/// Rauch-Tung-Striebel smoothed marginals `(mean, variance)` of the states
/// `x_t = x_{t-1} + v_t` of one column, with `x_0 = 0`.
pub fn rts_smoother(
    obs: &[f64],
    obs_prec: &[f64],
    inc_mean: &[f64],
    inc_prec: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = obs.len();
    let mut fm = vec![0.0; n];
    let mut fv = vec![0.0; n];
    let mut pred_v = vec![0.0; n];
    let (mut pm, mut pv) = (0.0, 0.0);
    for t in 0..n {
        let m_pred = pm + inc_mean[t];
        let v_pred = pv + 1.0 / inc_prec[t];
        pred_v[t] = v_pred;
        let gain = v_pred / (v_pred + 1.0 / obs_prec[t]);
        fm[t] = m_pred + gain * (obs[t] - m_pred);
        fv[t] = (1.0 - gain) * v_pred;
        pm = fm[t];
        pv = fv[t];
    }
    let mut sm = fm.clone();
    let mut sv = fv.clone();
    for t in (0..n.saturating_sub(1)).rev() {
        let g = fv[t] / pred_v[t + 1];
        sm[t] = fm[t] + g * (sm[t + 1] - fm[t] - inc_mean[t + 1]);
        sv[t] = fv[t] + g * g * (sv[t + 1] - pred_v[t + 1]);
    }
    (sm, sv)
}

fn ess_rows(
    mean: Option<&DMatrix<f64>>,
    q: &Prec,
    current: &DMatrix<f64>,
    f: &dyn Fn(usize, &DVector<f64>) -> f64,
    rng: &mut Rng,
) -> DMatrix<f64> {
    let (n, k) = current.shape();
    let mut out = current.clone();
    for i in 0..n {
        let x = row_vec(current, i);
        let m = match mean {
            Some(mm) => row_vec(mm, i),
            None => DVector::zeros(k),
        };
        let nu = std_normal_vec(k, rng).zip_map(&DVector::from_fn(k, |c, _| q.at(i, c)), |z, p| z / p.sqrt());
        let ll = f(i, &x);
        let (x, _) = elliptical_slice(&x, ll, &m, &nu, |v| f(i, v), rng);
        out.row_mut(i).copy_from(&x.transpose());
    }
    out
}

fn ln_pi(p: f64) -> f64 {
    p.max(1e-300).ln()
}

fn logit(p: f64) -> f64 {
    ln_pi(p) - ln_pi(1.0 - p)
}

/// One-hot rows of `value` given `target ~ (scale o value) design`.
fn one_hot_rows(value: &mut DMatrix<f64>, pi: &DVector<f64>, l: &Lin, rng: &mut Rng) {
    let pf = l.prec.full();
    let bt = l.design.transpose();
    let y = l.target.component_mul(&pf) * &bt;
    let d = &pf * l.design.map(|v| v * v).transpose();
    let k = value.ncols();
    for i in 0..value.nrows() {
        let logw: Vec<f64> = (0..k)
            .map(|c| {
                let s = l.scale_at(i, c);
                ln_pi(pi[c]) + s * y[(i, c)] - 0.5 * s * s * d[(i, c)]
            })
            .collect();
        let c = sample_log_weights(&logw, rng);
        value.row_mut(i).fill(0.0);
        value[(i, c)] = 1.0;
    }
}

/// One-hot rows of `value` given `target ~ design (scale o value)`: row `r`
/// choosing column `c` adds `scale[r, c] * design[:, r]` to column `c`.
fn one_hot_right(value: &mut DMatrix<f64>, pi: &DVector<f64>, l: &Lin, rng: &mut Rng) {
    let a = &l.design;
    let scaled = match &l.scale {
        Some(s) => value.component_mul(s),
        None => value.clone(),
    };
    let mut pred = a * scaled;
    let (rows, m) = value.shape();
    let n = a.nrows();
    for r in 0..rows {
        if let Some(c0) = one_hot_index(value, r) {
            let s = l.scale_at(r, c0);
            for i in 0..n {
                pred[(i, c0)] -= s * a[(i, r)];
            }
        }
        let logw: Vec<f64> = (0..m)
            .map(|c| {
                let s = l.scale_at(r, c);
                let mut w = ln_pi(pi[c]);
                for i in 0..n {
                    let p = l.prec.at(i, c);
                    let ar = s * a[(i, r)];
                    w += p * ar * (l.target[(i, c)] - pred[(i, c)]) - 0.5 * p * ar * ar;
                }
                w
            })
            .collect();
        let c = sample_log_weights(&logw, rng);
        value.row_mut(r).fill(0.0);
        value[(r, c)] = 1.0;
        let s = l.scale_at(r, c);
        for i in 0..n {
            pred[(i, c)] += s * a[(i, r)];
        }
    }
}

/// Single-bit updates of `value` given `target ~ (scale o value) design`.
fn bits_rows(value: &mut DMatrix<f64>, prior_logit: &dyn Fn(usize, usize) -> f64, l: &Lin, rng: &mut Rng) {
    let k = value.ncols();
    if k == 0 {
        return;
    }
    let bt = l.design.transpose();
    let (y, k0) = match &l.prec {
        Prec::Outer { col, .. } => {
            let mut rc = l.target.clone();
            let mut bd = l.design.clone();
            for j in 0..col.len() {
                rc.column_mut(j).scale_mut(col[j]);
                bd.column_mut(j).scale_mut(col[j]);
            }
            (&rc * &bt, Some(&bd * &bt))
        }
        Prec::Full(p) => (l.target.component_mul(p) * &bt, None),
    };
    for i in 0..value.nrows() {
        let mut kk = match (&k0, &l.prec) {
            (Some(k0), Prec::Outer { row, .. }) => k0 * row[i],
            (_, Prec::Full(p)) => {
                let mut bd = l.design.clone();
                for j in 0..p.ncols() {
                    bd.column_mut(j).scale_mut(p[(i, j)]);
                }
                &bd * &bt
            }
            _ => unreachable!(),
        };
        let mut yi = match &l.prec {
            Prec::Outer { row, .. } => row_vec(&y, i) * row[i],
            Prec::Full(_) => row_vec(&y, i),
        };
        if l.scale.is_some() {
            for a in 0..k {
                yi[a] *= l.scale_at(i, a);
                for b in 0..k {
                    kk[(a, b)] *= l.scale_at(i, a) * l.scale_at(i, b);
                }
            }
        }
        let mut b = row_vec(value, i);
        let mut kb = &kk * &b;
        for c in 0..k {
            let others = kb[c] - kk[(c, c)] * b[c];
            let delta = prior_logit(i, c) + yi[c] - others - 0.5 * kk[(c, c)];
            let new = if sample_bit(delta, rng) { 1.0 } else { 0.0 };
            if new != b[c] {
                let diff = new - b[c];
                for a in 0..k {
                    kb[a] += diff * kk[(a, c)];
                }
                b[c] = new;
            }
        }
        value.row_mut(i).copy_from(&b.transpose());
    }
}

/// Updates a node and everything below it given its likelihood context.
pub(crate) fn update(node: &mut Node, ctx: &Ctx, hyper: &Hyper, rng: &mut Rng) -> Result<()> {
    match &mut node.body {
        Body::Floor => {}
        Body::Leaf { params, .. } => update_leaf(&mut node.value, params, ctx, hyper, rng)?,
        Body::Sum { terms, noise } => {
            let mut mu = DMatrix::zeros(node.value.nrows(), node.value.ncols());
            for t in terms.iter() {
                mu += &t.value;
            }
            let q = Prec::of_noise(noise);
            let v = sample_gaussian(Some(&mu), &q, &node.value, ctx, rng)?;
            noise.value = &v - &mu;
            node.value = v;
            update_sum_internals(node, hyper, rng)?;
        }
        Body::Product(a, b) => {
            let Ctx::Direct { target, prec } = ctx else {
                return Err(Error::InvalidInput("product below a non-direct context".into()));
            };
            let chain_a = matches!(&b.body, Body::Transpose(c) if c.is_integration());
            let chain_b = matches!(&a.body, Body::Leaf { params: Params::Integration, .. });
            let la = Lin {
                target: target.clone(),
                prec: prec.clone(),
                design: b.value.clone(),
                scale: None,
                chain: chain_a,
            };
            update(a, &Ctx::Left(la), hyper, rng)?;
            let lb = Lin {
                target: target.clone(),
                prec: prec.clone(),
                design: a.value.clone(),
                scale: None,
                chain: chain_b,
            };
            update(b, &Ctx::Right(lb), hyper, rng)?;
        }
        Body::Transpose(c) => update(c, &ctx.t(), hyper, rng)?,
        Body::ElemProd { log_scale, coef } => update_elem_prod(log_scale, coef, ctx, hyper, rng)?,
    }
    node.refresh();
    Ok(())
}

fn update_leaf(
    value: &mut DMatrix<f64>,
    params: &mut Params,
    ctx: &Ctx,
    hyper: &Hyper,
    rng: &mut Rng,
) -> Result<()> {
    if value.is_empty() {
        return Ok(());
    }
    match params {
        Params::Gaussian(g) => {
            let q = Prec::Outer {
                row: g.row.clone(),
                col: g.col.clone(),
            };
            *value = sample_gaussian(None, &q, value, ctx, rng)?;
            g.resample(value, hyper, rng);
        }
        Params::Multinomial(m) => {
            match ctx {
                Ctx::Direct { target, prec } => {
                    let l = Lin {
                        target: target.clone(),
                        prec: prec.clone(),
                        design: DMatrix::identity(value.ncols(), value.ncols()),
                        scale: None,
                        chain: false,
                    };
                    one_hot_rows(value, &m.pi, &l, rng);
                }
                Ctx::Left(l) => one_hot_rows(value, &m.pi, l, rng),
                Ctx::Right(l) => one_hot_right(value, &m.pi, l, rng),
                Ctx::Rows(_) | Ctx::Cols(_) => log::debug!("one-hot leaf below exp left unchanged"),
            }
            m.resample(value, hyper, rng);
        }
        Params::Bernoulli(b) => {
            let pi = b.pi.clone();
            match ctx {
                Ctx::Direct { target, prec } => {
                    for j in 0..value.ncols() {
                        for i in 0..value.nrows() {
                            let delta = logit(pi[j]) + prec.at(i, j) * (target[(i, j)] - 0.5);
                            value[(i, j)] = if sample_bit(delta, rng) { 1.0 } else { 0.0 };
                        }
                    }
                }
                Ctx::Left(l) => bits_rows(value, &|_, c| logit(pi[c]), l, rng),
                Ctx::Right(l) => {
                    let mut vt = value.transpose();
                    bits_rows(&mut vt, &|i, _| logit(pi[i]), &l.t(), rng);
                    *value = vt.transpose();
                }
                Ctx::Rows(_) | Ctx::Cols(_) => log::debug!("binary leaf below exp left unchanged"),
            }
            b.resample(value, hyper, rng);
        }
        Params::Integration => {}
    }
    Ok(())
}

fn update_elem_prod(log_scale: &mut Node, coef: &mut Node, ctx: &Ctx, hyper: &Hyper, rng: &mut Rng) -> Result<()> {
    let e = log_scale.value.map(f64::exp);
    {
        let fw: Box<dyn Fn(usize, &DVector<f64>) -> f64 + '_>;
        let ctx_w = match ctx {
            Ctx::Direct { target, prec } => Ctx::Direct {
                target: target.component_div(&e),
                prec: Prec::Full(prec.full().component_mul(&e.component_mul(&e))),
            },
            Ctx::Left(l) | Ctx::Right(l) => {
                let mut l2 = l.clone();
                l2.scale = Some(match &l.scale {
                    Some(s) => s.component_mul(&e),
                    None => e.clone(),
                });
                l2.chain = false;
                if matches!(ctx, Ctx::Left(_)) {
                    Ctx::Left(l2)
                } else {
                    Ctx::Right(l2)
                }
            }
            Ctx::Rows(f) => {
                fw = Box::new(|i: usize, w: &DVector<f64>| f(i, &row_vec(&e, i).component_mul(w)));
                Ctx::Rows(fw.as_ref())
            }
            Ctx::Cols(f) => {
                fw = Box::new(|j: usize, w: &DVector<f64>| f(j, &e.column(j).component_mul(w)));
                Ctx::Cols(fw.as_ref())
            }
        };
        update(coef, &ctx_w, hyper, rng)?;
    }
    let w = &coef.value;
    let (n, m) = w.shape();
    let fz: Box<dyn Fn(usize, &DVector<f64>) -> f64 + '_>;
    let by_rows;
    match ctx {
        Ctx::Direct { target, prec } => {
            by_rows = true;
            fz = Box::new(move |i, z| {
                let mut s = 0.0;
                for j in 0..m {
                    let r = target[(i, j)] - z[j].exp() * w[(i, j)];
                    s += prec.at(i, j) * r * r;
                }
                -0.5 * s
            });
        }
        Ctx::Left(l) => {
            by_rows = true;
            fz = Box::new(move |i, z| {
                let u = DVector::from_fn(m, |c, _| l.scale_at(i, c) * z[c].exp() * w[(i, c)]);
                let pred = l.design.tr_mul(&u);
                let mut s = 0.0;
                for j in 0..pred.len() {
                    let r = l.target[(i, j)] - pred[j];
                    s += l.prec.at(i, j) * r * r;
                }
                -0.5 * s
            });
        }
        Ctx::Right(l) => {
            by_rows = false;
            fz = Box::new(move |j, z| {
                let u = DVector::from_fn(n, |c, _| l.scale_at(c, j) * z[c].exp() * w[(c, j)]);
                let pred = &l.design * u;
                let mut s = 0.0;
                for i in 0..pred.len() {
                    let r = l.target[(i, j)] - pred[i];
                    s += l.prec.at(i, j) * r * r;
                }
                -0.5 * s
            });
        }
        Ctx::Rows(f) => {
            by_rows = true;
            fz = Box::new(move |i, z| f(i, &z.map(f64::exp).component_mul(&row_vec(w, i))));
        }
        Ctx::Cols(f) => {
            by_rows = false;
            fz = Box::new(move |j, z| f(j, &z.map(f64::exp).component_mul(&w.column(j))));
        }
    }
    let ctx_z = if by_rows { Ctx::Rows(fz.as_ref()) } else { Ctx::Cols(fz.as_ref()) };
    update(log_scale, &ctx_z, hyper, rng)
}

/// Updates the terms and noise of a sum whose value is held fixed.
pub(crate) fn update_sum_internals(node: &mut Node, hyper: &Hyper, rng: &mut Rng) -> Result<()> {
    let Body::Sum { terms, noise } = &mut node.body else {
        return Err(Error::InvalidInput("expected a sum".into()));
    };
    let prec = Prec::of_noise(noise);
    for t in terms.iter_mut() {
        let target = &t.value + &noise.value;
        update(
            t,
            &Ctx::Direct {
                target: target.clone(),
                prec: prec.clone(),
            },
            hyper,
            rng,
        )?;
        noise.value = target - &t.value;
    }
    if let Body::Leaf {
        params: Params::Gaussian(g),
        ..
    } = &mut noise.body
    {
        g.resample(&noise.value, hyper, rng);
    }
    Ok(())
}

/// Redraws the unobserved entries of the root value from the model.
pub fn impute(state: &mut State, mask: Option<&Mask>, rng: &mut Rng) {
    let root = &mut state.root;
    let Body::Sum { noise, .. } = &mut root.body else {
        unreachable!("root is always a sum");
    };
    let prec = Prec::of_noise(noise);
    let (n, d) = root.value.shape();
    for j in 0..d {
        for i in 0..n {
            if mask.is_some_and(|m| m[(i, j)]) {
                continue;
            }
            let z: f64 = StandardNormal.sample(rng);
            let e = z / prec.at(i, j).sqrt();
            root.value[(i, j)] += e - noise.value[(i, j)];
            noise.value[(i, j)] = e;
        }
    }
}

/// One full sweep: every component given the rest, then the hyperparameters,
/// then the unobserved entries. Observed entries of the root value are never
/// changed, so `state.value()` must already hold the data there.
pub fn gibbs_sweep(state: &mut State, mask: &Mask, hyper: &Hyper, rng: &mut Rng) -> Result<()> {
    update_sum_internals(&mut state.root, hyper, rng)?;
    impute(state, Some(mask), rng);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Brute-force joint Gaussian conditioning of a random walk.
    fn dense_walk_posterior(obs: &[f64], obs_prec: &[f64], inc_mean: &[f64], inc_prec: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = obs.len();
        let c = crate::linalg::lower_ones(n);
        let mu_x = &c * DVector::from_column_slice(inc_mean);
        let cov_v = DMatrix::from_diagonal(&DVector::from_iterator(n, inc_prec.iter().map(|p| 1.0 / p)));
        let cov_x = &c * cov_v * c.transpose();
        let cov_y = &cov_x + DMatrix::from_diagonal(&DVector::from_iterator(n, obs_prec.iter().map(|p| 1.0 / p)));
        let inv = cov_y.try_inverse().unwrap();
        let gain = &cov_x * &inv;
        let mean = &mu_x + &gain * (DVector::from_column_slice(obs) - &mu_x);
        let cov = &cov_x - &gain * &cov_x;
        (mean.iter().copied().collect(), cov.diagonal().iter().copied().collect())
    }

    #[test]
    fn smoother_matches_dense_conditioning() {
        let obs = [0.3, -0.2, 1.1, 0.7, 0.9, 2.0];
        let obs_prec = [2.0, 1.0, 0.5, 3.0, 1.5, 1.0];
        let inc_mean = [0.1, 0.0, -0.2, 0.3, 0.0, 0.1];
        let inc_prec = [1.0, 2.0, 0.7, 1.3, 4.0, 0.9];
        let (m, v) = rts_smoother(&obs, &obs_prec, &inc_mean, &inc_prec);
        let (dm, dv) = dense_walk_posterior(&obs, &obs_prec, &inc_mean, &inc_prec);
        for t in 0..6 {
            assert!((m[t] - dm[t]).abs() < 1e-8, "mean {t}");
            assert!((v[t] - dv[t]).abs() < 1e-8, "var {t}");
        }
    }

    #[test]
    fn ffbs_draws_match_smoother() {
        let obs = [0.3, -0.2, 1.1, 0.7];
        let obs_prec = [2.0, 1.0, 0.5, 3.0];
        let inc_prec = [1.0, 2.0, 0.7, 1.3];
        let (m, v) = rts_smoother(&obs, &obs_prec, &[0.0; 4], &inc_prec);
        let target = DMatrix::from_column_slice(4, 1, &obs);
        let prec = Prec::Full(DMatrix::from_column_slice(4, 1, &obs_prec));
        let q = Prec::Full(DMatrix::from_column_slice(4, 1, &inc_prec));
        let mut rng = seeded(4);
        let n = 40000;
        let mut s = [0.0; 4];
        let mut ss = [0.0; 4];
        for _ in 0..n {
            let inc = chain_cols(None, &q, &target, &prec, &mut rng);
            let x = crate::linalg::cumsum_rows(&inc);
            for t in 0..4 {
                s[t] += x[(t, 0)];
                ss[t] += x[(t, 0)] * x[(t, 0)];
            }
        }
        for t in 0..4 {
            let mean = s[t] / n as f64;
            let var = ss[t] / n as f64 - mean * mean;
            assert!((mean - m[t]).abs() < 4.0 * (v[t] / n as f64).sqrt() + 1e-3);
            assert!((var - v[t]).abs() < 0.05 * v[t]);
        }
    }

    #[test]
    fn row_sampler_matches_dense_posterior() {
        // target (1x3) = v (1x2) * design + noise, v ~ N(0, 1/q).
        let design = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -1.0, 0.2, 1.0, 0.3]);
        let target = DMatrix::from_row_slice(1, 3, &[0.7, -0.4, 1.2]);
        let p = DMatrix::from_row_slice(1, 3, &[2.0, 1.0, 0.5]);
        let q = Prec::Full(DMatrix::from_row_slice(1, 2, &[1.5, 0.8]));
        let l = Lin {
            target: target.clone(),
            prec: Prec::Full(p.clone()),
            design: design.clone(),
            scale: Some(DMatrix::from_row_slice(1, 2, &[0.5, 2.0])),
            chain: false,
        };
        let ds = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])) * &design;
        let lam = &ds * DMatrix::from_diagonal(&p.row(0).transpose()) * ds.transpose()
            + DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.8]));
        let cov = lam.clone().try_inverse().unwrap();
        let mean = &cov * (&ds * target.component_mul(&p).transpose());
        let mut rng = seeded(5);
        let n = 40000;
        let mut s = DVector::zeros(2);
        for _ in 0..n {
            s += gaussian_rows(None, &q, &l, &mut rng).unwrap().row(0).transpose();
        }
        assert!((s / n as f64 - mean).norm() < 0.02);
    }
}
