//! Joint and marginal negative log-likelihoods.
//!
//! Sign convention: everything here is a *negative* log-likelihood and is
//! minimized. The joint NLL `h` is exactly quadratic in the random effects
//! `w` because the data are Gaussian and `Z` is fixed once the outer
//! parameters are fixed, so the inner problem is solved by a single linear
//! solve:
//!
//! ```text
//! (Z'Z / sigma^2 + G^{-1}) w~ = Z'(y - X beta) / sigma^2
//! ```
//!
//! The Laplace objective
//!
//! ```text
//! nll_LA = h(w~) + 0.5 log|Z'Z/sigma^2 + G^{-1}| - (q/2) log(2 pi)
//! ```
//!
//! coincides with the marginal NLL computed directly from the n x n
//! covariance `V = Z G Z' + sigma^2 I`; [`direct_marginal_nll`] implements
//! that dense route independently and serves as the oracle for the fast
//! path.
//!
//! The curvature matrix `Z'Z/sigma^2 + G^{-1}` is block diagonal across
//! groups whenever the interaction effect is nested in the grouping factor
//! (the usual case), which the solver exploits; a dense q x q path covers
//! the general case and doubles as the correctness reference.

use crate::data::Dataset;
use crate::design::{mult_covariate, DesignLayout, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::{Chol, SymMat};
use crate::num::{ln_2pi, Scalar};

/// Default observation cap for the dense marginal oracle.
pub const DEFAULT_ORACLE_CAP: usize = 2000;

/// Random-effect covariance pieces: one (a, b) block shared by all groups
/// plus the interaction variance.
#[derive(Debug, Clone)]
pub struct GMatrix<F> {
    /// Width of the per-group block: 0, 1, or 2.
    pub width: usize,
    /// Covariance of the per-group effects, row-major `width x width`.
    pub ab_cov: [F; 4],
    /// Its inverse.
    pub ab_inv: [F; 4],
    /// log det of the per-group covariance block.
    pub ab_log_det: F,
    pub n_groups: usize,
    /// Interaction variance, if the model has a d term.
    pub d_var: Option<F>,
    /// Number of instantiated interaction effects (all cells of the grid).
    pub n_dcells: usize,
}

impl<F: Scalar> GMatrix<F> {
    /// Build from natural-scale parameters; fails when a variance is zero
    /// or the block is numerically singular.
    pub fn new(pv: &ParamVector<F>, layout: &DesignLayout) -> Result<Self> {
        let nat = pv.natural();
        let width = layout.ab_width();
        let mut ab_cov = [F::zero(); 4];
        let mut ab_inv = [F::zero(); 4];
        let mut ab_log_det = F::zero();
        match (nat.sigma_a, nat.sigma_b) {
            (Some(sa), Some(sb)) => {
                let rho = nat.rho.expect("rho present with both a and b");
                let va = sa * sa;
                let vb = sb * sb;
                let cab = rho * sa * sb;
                let det = va * vb - cab * cab;
                if !(det > F::zero()) || !det.is_finite() {
                    return Err(Error::IndefiniteCurvature);
                }
                ab_cov = [va, cab, cab, vb];
                ab_inv = [vb / det, -cab / det, -cab / det, va / det];
                ab_log_det = det.ln();
            }
            (Some(sa), None) => {
                let va = sa * sa;
                if !(va > F::zero()) || !va.is_finite() {
                    return Err(Error::IndefiniteCurvature);
                }
                ab_cov[0] = va;
                ab_inv[0] = va.recip();
                ab_log_det = va.ln();
            }
            (None, Some(sb)) => {
                let vb = sb * sb;
                if !(vb > F::zero()) || !vb.is_finite() {
                    return Err(Error::IndefiniteCurvature);
                }
                ab_cov[0] = vb;
                ab_inv[0] = vb.recip();
                ab_log_det = vb.ln();
            }
            (None, None) => {}
        }
        let d_var = match nat.sigma_d {
            Some(sd) => {
                let vd = sd * sd;
                if !(vd > F::zero()) || !vd.is_finite() {
                    return Err(Error::IndefiniteCurvature);
                }
                Some(vd)
            }
            None => None,
        };
        Ok(GMatrix {
            width,
            ab_cov,
            ab_inv,
            ab_log_det,
            n_groups: layout.n_groups,
            d_var,
            n_dcells: layout.q_d(),
        })
    }

    /// log det of the full G (all groups and interaction cells).
    pub fn log_det(&self) -> F {
        let mut s = F::of(self.n_groups as f64) * self.ab_log_det;
        if let Some(vd) = self.d_var {
            s = s + F::of(self.n_dcells as f64) * vd.ln();
        }
        s
    }

    /// w' G^{-1} w for a layout-ordered random-effect vector.
    fn prior_quad(&self, layout: &DesignLayout, w: &[F]) -> F {
        let mut s = F::zero();
        for i in 0..layout.n_groups {
            match self.width {
                1 => {
                    let u = w[i];
                    s = s + u * u * self.ab_inv[0];
                }
                2 => {
                    let ua = w[layout.idx_a(i)];
                    let ub = w[layout.idx_b(i)];
                    s = s
                        + ua * ua * self.ab_inv[0]
                        + (ua * ub + ua * ub) * self.ab_inv[1]
                        + ub * ub * self.ab_inv[3];
                }
                _ => {}
            }
        }
        if let Some(vd) = self.d_var {
            let q_ab = layout.q_ab();
            for c in 0..self.n_dcells {
                let u = w[q_ab + c];
                s = s + u * u / vd;
            }
        }
        s
    }
}

/// Factored curvature of the joint NLL in `w`.
#[derive(Debug, Clone)]
enum CurvFactor<F> {
    /// One Cholesky per group block (requires a group-nested interaction).
    Blocked { chols: Vec<Chol<F>> },
    /// Single dense q x q Cholesky.
    Dense(Chol<F>),
}

/// Which curvature representation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurvatureMode {
    /// Blocked when the layout allows it, dense otherwise.
    #[default]
    Auto,
    /// Force the dense q x q path (reference implementation).
    Dense,
}

/// Solution of the inner problem at fixed outer parameters.
#[derive(Debug, Clone)]
pub struct InnerSolution<F> {
    /// Random-effect modes, in layout order.
    pub w_tilde: Vec<F>,
    /// log det of the curvature `Z'Z/sigma^2 + G^{-1}`.
    pub log_det: F,
    factor: CurvFactor<F>,
    q: usize,
}

impl<F: Scalar> InnerSolution<F> {
    pub fn q(&self) -> usize {
        self.q
    }

    /// Solve `H x = rhs` against the stored factorization.
    pub fn solve(&self, layout: &DesignLayout, rhs: &[F]) -> Vec<F> {
        assert_eq!(rhs.len(), self.q);
        match &self.factor {
            CurvFactor::Dense(ch) => ch.solve(rhs),
            CurvFactor::Blocked { chols } => {
                let map = BlockMap::new(layout);
                let mut out = vec![F::zero(); self.q];
                for (k, ch) in chols.iter().enumerate() {
                    let local: Vec<F> = (0..ch.n()).map(|l| rhs[map.global(k, l)]).collect();
                    let sol = ch.solve(&local);
                    for (l, v) in sol.into_iter().enumerate() {
                        out[map.global(k, l)] = v;
                    }
                }
                out
            }
        }
    }

    /// Materialize the q x q curvature matrix (the negated Hessian of the
    /// joint log-likelihood with respect to `w`).
    pub fn curvature_dense(&self, layout: &DesignLayout) -> SymMat<F> {
        let mut h = SymMat::zeros(self.q);
        match &self.factor {
            CurvFactor::Dense(ch) => {
                // H = L L'
                for i in 0..self.q {
                    for j in 0..=i {
                        let mut s = F::zero();
                        for k in 0..=j {
                            s = s + ch_l(ch, i, k) * ch_l(ch, j, k);
                        }
                        h.set(i, j, s);
                    }
                }
            }
            CurvFactor::Blocked { chols } => {
                let map = BlockMap::new(layout);
                for (kb, ch) in chols.iter().enumerate() {
                    let m = ch.n();
                    for i in 0..m {
                        for j in 0..=i {
                            let mut s = F::zero();
                            for k in 0..=j {
                                s = s + ch_l(ch, i, k) * ch_l(ch, j, k);
                            }
                            h.set(map.global(kb, i), map.global(kb, j), s);
                        }
                    }
                }
            }
        }
        h
    }

    /// Inverse-curvature view used by the gradient.
    fn inverse(&self, layout: &DesignLayout) -> HinvView<F> {
        match &self.factor {
            CurvFactor::Dense(ch) => HinvView::Dense(ch.inverse()),
            CurvFactor::Blocked { chols } => HinvView::Blocked {
                blocks: chols.iter().map(|c| c.inverse()).collect(),
                map: BlockMap::new(layout),
            },
        }
    }
}

// Chol internals access for materialization: L is lower-triangular row-major.
fn ch_l<F: Scalar>(ch: &Chol<F>, i: usize, j: usize) -> F {
    ch.l_entry(i, j)
}

/// Inverse of the curvature, blocked or dense.
enum HinvView<F> {
    Dense(SymMat<F>),
    Blocked { blocks: Vec<SymMat<F>>, map: BlockMap },
}

impl<F: Scalar> HinvView<F> {
    /// Entry by global indices; zero across blocks.
    fn get(&self, gi: usize, gj: usize) -> F {
        match self {
            HinvView::Dense(m) => m.get(gi, gj),
            HinvView::Blocked { blocks, map } => {
                let (bi, li) = map.local(gi);
                let (bj, lj) = map.local(gj);
                if bi != bj {
                    F::zero()
                } else {
                    blocks[bi].get(li, lj)
                }
            }
        }
    }
}

/// Index mapping between global layout order and per-group blocks.
#[derive(Debug, Clone)]
struct BlockMap {
    ab_width: usize,
    d_cols: usize,
    q_ab: usize,
}

impl BlockMap {
    fn new(layout: &DesignLayout) -> Self {
        BlockMap {
            ab_width: layout.ab_width(),
            d_cols: if layout.has_d { layout.d_shape.1 } else { 0 },
            q_ab: layout.q_ab(),
        }
    }

    fn block_size(&self) -> usize {
        self.ab_width + self.d_cols
    }

    fn global(&self, block: usize, local: usize) -> usize {
        if local < self.ab_width {
            block * self.ab_width + local
        } else {
            self.q_ab + block * self.d_cols + (local - self.ab_width)
        }
    }

    fn local(&self, global: usize) -> (usize, usize) {
        if global < self.q_ab {
            (global / self.ab_width, global % self.ab_width)
        } else {
            let off = global - self.q_ab;
            (off / self.d_cols, self.ab_width + off % self.d_cols)
        }
    }
}

fn blockable(layout: &DesignLayout) -> bool {
    if !layout.has_d {
        return true;
    }
    if layout.ab_width() == 0 {
        // pure-d model: group by the interaction rows
        return true;
    }
    layout.d_grouped && layout.d_shape.0 == layout.n_groups
}

fn n_blocks(layout: &DesignLayout) -> usize {
    if layout.ab_width() > 0 {
        layout.n_groups
    } else if layout.has_d {
        layout.d_shape.0
    } else {
        0
    }
}

/// Joint negative log-likelihood `h` at given random effects.
///
/// `-log p(y | w) - log p(w)`, evaluated term by term.
pub fn joint_nll<F: Scalar>(
    pv: &ParamVector<F>,
    w: &[F],
    layout: &DesignLayout,
    ds: &Dataset<F>,
) -> Result<F> {
    if w.len() != layout.q() {
        return Err(Error::DimensionMismatch(format!(
            "w has length {}, expected q = {}",
            w.len(),
            layout.q()
        )));
    }
    if !pv.is_finite() {
        return Err(Error::NonFinite("parameter vector"));
    }
    let nat = pv.natural();
    let sigma2 = nat.sigma * nat.sigma;
    let g = GMatrix::new(pv, layout)?;
    let nu = mult_covariate(&pv.beta, layout.centering);

    let n = layout.n_obs;
    let half = F::of(0.5);
    let mut s = F::of(n as f64) * half * (ln_2pi::<F>() + sigma2.ln());
    let y = ds.response();
    for o in 0..n {
        let mut mean = pv.beta[layout.obs_cell[o] as usize];
        if layout.has_a {
            mean = mean + w[layout.idx_a(layout.obs_group[o] as usize)];
        }
        if layout.has_b {
            let j = layout.obs_cell[o] as usize;
            mean = mean + nu[j] * w[layout.idx_b(layout.obs_group[o] as usize)];
        }
        if layout.has_d {
            mean = mean + w[layout.idx_d(layout.obs_dcell[o] as usize)];
        }
        let r = y[o] - mean;
        s = s + r * r / (sigma2 + sigma2);
    }

    // prior: 0.5 log|2 pi G| + 0.5 w' G^{-1} w
    let q = layout.q();
    s = s + half * (F::of(q as f64) * ln_2pi::<F>() + g.log_det());
    s = s + half * g.prior_quad(layout, w);

    if !s.is_finite() {
        return Err(Error::NonFinite("joint negative log-likelihood"));
    }
    Ok(s)
}

/// Solve the inner problem: modes, curvature factorization, log-determinant.
pub fn inner_solve<F: Scalar>(
    pv: &ParamVector<F>,
    layout: &DesignLayout,
    ds: &Dataset<F>,
) -> Result<InnerSolution<F>> {
    inner_solve_with(pv, layout, ds, CurvatureMode::Auto)
}

pub fn inner_solve_with<F: Scalar>(
    pv: &ParamVector<F>,
    layout: &DesignLayout,
    ds: &Dataset<F>,
    mode: CurvatureMode,
) -> Result<InnerSolution<F>> {
    if !pv.is_finite() {
        return Err(Error::NonFinite("parameter vector"));
    }
    if pv.beta.len() != layout.n_cells {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, expected {}",
            pv.beta.len(),
            layout.n_cells
        )));
    }
    let q = layout.q();
    if q == 0 {
        return Ok(InnerSolution {
            w_tilde: Vec::new(),
            log_det: F::zero(),
            factor: CurvFactor::Blocked { chols: Vec::new() },
            q: 0,
        });
    }

    let nat = pv.natural();
    let sigma2 = nat.sigma * nat.sigma;
    if !(sigma2 > F::zero()) || !sigma2.is_finite() {
        return Err(Error::IndefiniteCurvature);
    }
    let g = GMatrix::new(pv, layout)?;
    let nu = mult_covariate(&pv.beta, layout.centering);
    let y = ds.response();
    let inv_s2 = sigma2.recip();

    let use_blocked = mode == CurvatureMode::Auto && blockable(layout);

    if use_blocked {
        let map = BlockMap::new(layout);
        let m = map.block_size();
        let nb = n_blocks(layout);
        let mut blocks: Vec<SymMat<F>> = (0..nb).map(|_| SymMat::zeros(m)).collect();
        let mut rhs: Vec<Vec<F>> = vec![vec![F::zero(); m]; nb];

        // Z'Z / sigma^2 and Z'r0 / sigma^2, accumulated per block
        let mut loads: Vec<(usize, F)> = Vec::with_capacity(3);
        for o in 0..layout.n_obs {
            let block = if layout.ab_width() > 0 {
                layout.obs_group[o] as usize
            } else {
                layout.obs_dcell[o] as usize / map.d_cols
            };
            loads.clear();
            let mut l = 0usize;
            if layout.has_a {
                loads.push((l, F::one()));
                l += 1;
            }
            if layout.has_b {
                loads.push((l, nu[layout.obs_cell[o] as usize]));
            }
            if layout.has_d {
                loads.push((
                    map.ab_width + (layout.obs_dcell[o] as usize % map.d_cols),
                    F::one(),
                ));
            }
            let r0 = (y[o] - pv.beta[layout.obs_cell[o] as usize]) * inv_s2;
            let h = &mut blocks[block];
            for (idx1, v1) in loads.iter() {
                rhs[block][*idx1] = rhs[block][*idx1] + *v1 * r0;
                for (idx2, v2) in loads.iter() {
                    if idx2 >= idx1 {
                        h.add(*idx1, *idx2, *v1 * *v2 * inv_s2);
                    }
                }
            }
        }

        // + G^{-1}
        for h in blocks.iter_mut() {
            match map.ab_width {
                1 => h.add(0, 0, g.ab_inv[0]),
                2 => {
                    h.add(0, 0, g.ab_inv[0]);
                    h.add(0, 1, g.ab_inv[1]);
                    h.add(1, 1, g.ab_inv[3]);
                }
                _ => {}
            }
            if let Some(vd) = g.d_var {
                for c in 0..map.d_cols {
                    h.add(map.ab_width + c, map.ab_width + c, vd.recip());
                }
            }
        }

        let mut w = vec![F::zero(); q];
        let mut log_det = F::zero();
        let mut chols = Vec::with_capacity(nb);
        for (k, h) in blocks.into_iter().enumerate() {
            let ch = h.cholesky()?;
            log_det = log_det + ch.log_det();
            let sol = ch.solve(&rhs[k]);
            for (l, v) in sol.into_iter().enumerate() {
                w[map.global(k, l)] = v;
            }
            chols.push(ch);
        }
        Ok(InnerSolution { w_tilde: w, log_det, factor: CurvFactor::Blocked { chols }, q })
    } else {
        let mut h = SymMat::zeros(q);
        let mut rhs = vec![F::zero(); q];
        for o in 0..layout.n_obs {
            let row = crate::design::loading_row(layout, o, &nu);
            let r0 = (y[o] - pv.beta[layout.obs_cell[o] as usize]) * inv_s2;
            for (i1, v1) in row.iter() {
                rhs[*i1] = rhs[*i1] + *v1 * r0;
                for (i2, v2) in row.iter() {
                    if i2 >= i1 {
                        h.add(*i1, *i2, *v1 * *v2 * inv_s2);
                    }
                }
            }
        }
        for i in 0..layout.n_groups {
            match layout.ab_width() {
                1 => {
                    let ia = if layout.has_a { layout.idx_a(i) } else { layout.idx_b(i) };
                    h.add(ia, ia, g.ab_inv[0]);
                }
                2 => {
                    let ia = layout.idx_a(i);
                    let ib = layout.idx_b(i);
                    h.add(ia, ia, g.ab_inv[0]);
                    h.add(ia, ib, g.ab_inv[1]);
                    h.add(ib, ib, g.ab_inv[3]);
                }
                _ => {}
            }
        }
        if let Some(vd) = g.d_var {
            for c in 0..layout.q_d() {
                let id = layout.idx_d(c);
                h.add(id, id, vd.recip());
            }
        }
        let ch = h.cholesky()?;
        let log_det = ch.log_det();
        let w = ch.solve(&rhs);
        Ok(InnerSolution { w_tilde: w, log_det, factor: CurvFactor::Dense(ch), q })
    }
}

/// Laplace-approximate marginal negative log-likelihood (exact here).
pub fn laplace_nll<F: Scalar>(
    pv: &ParamVector<F>,
    layout: &DesignLayout,
    ds: &Dataset<F>,
) -> Result<F> {
    Ok(laplace_nll_with_solution(pv, layout, ds, CurvatureMode::Auto)?.0)
}

pub fn laplace_nll_with_solution<F: Scalar>(
    pv: &ParamVector<F>,
    layout: &DesignLayout,
    ds: &Dataset<F>,
    mode: CurvatureMode,
) -> Result<(F, InnerSolution<F>)> {
    let sol = inner_solve_with(pv, layout, ds, mode)?;
    let h_mode = joint_nll(pv, &sol.w_tilde, layout, ds)?;
    let half = F::of(0.5);
    let q = F::of(sol.q as f64);
    let value = h_mode + half * sol.log_det - half * q * ln_2pi::<F>();
    if !value.is_finite() {
        return Err(Error::NonFinite("laplace objective"));
    }
    Ok((value, sol))
}

/// Exact marginal NLL via dense Cholesky of `V = Z G Z' + sigma^2 I`.
///
/// Oracle; refuses to build `V` beyond `cap` observations.
pub fn direct_marginal_nll<F: Scalar>(
    pv: &ParamVector<F>,
    layout: &DesignLayout,
    ds: &Dataset<F>,
    cap: usize,
) -> Result<F> {
    let n = layout.n_obs;
    if n > cap {
        return Err(Error::OracleSize { n, cap });
    }
    if !pv.is_finite() {
        return Err(Error::NonFinite("parameter vector"));
    }
    let nat = pv.natural();
    let sigma2 = nat.sigma * nat.sigma;
    let va = nat.sigma_a.map(|s| s * s);
    let vb = nat.sigma_b.map(|s| s * s);
    let cab = match (nat.sigma_a, nat.sigma_b, nat.rho) {
        (Some(sa), Some(sb), Some(r)) => Some(r * sa * sb),
        _ => None,
    };
    let vd = nat.sigma_d.map(|s| s * s);
    let nu = mult_covariate(&pv.beta, layout.centering);

    let mut v = SymMat::zeros(n);
    for o1 in 0..n {
        for o2 in o1..n {
            let mut cov = if o1 == o2 { sigma2 } else { F::zero() };
            if layout.ab_width() > 0 && layout.obs_group[o1] == layout.obs_group[o2] {
                if let Some(va) = va {
                    cov = cov + va;
                }
                if let Some(vb) = vb {
                    let n1 = nu[layout.obs_cell[o1] as usize];
                    let n2 = nu[layout.obs_cell[o2] as usize];
                    cov = cov + vb * n1 * n2;
                    if let Some(cab) = cab {
                        cov = cov + cab * (n1 + n2);
                    }
                }
            }
            if layout.has_d && layout.obs_dcell[o1] == layout.obs_dcell[o2] {
                if let Some(vd) = vd {
                    cov = cov + vd;
                }
            }
            v.set(o1, o2, cov);
        }
    }

    let ch = v.cholesky().map_err(|_| Error::CovarianceDegenerate)?;
    let y = ds.response();
    let r: Vec<F> = (0..n)
        .map(|o| y[o] - pv.beta[layout.obs_cell[o] as usize])
        .collect();
    let vinv_r = ch.solve(&r);
    let quad: F = r.iter().zip(&vinv_r).map(|(&a, &b)| a * b).sum();
    let half = F::of(0.5);
    let nll = F::of(n as f64) * half * ln_2pi::<F>() + half * ch.log_det() + half * quad;
    if !nll.is_finite() {
        return Err(Error::NonFinite("marginal negative log-likelihood"));
    }
    Ok(nll)
}

/// Gradient of [`laplace_nll`] with respect to the flat unconstrained
/// parameter vector, computed analytically (envelope theorem for the mode
/// plus trace terms for the log-determinant).
pub fn nll_gradient<F: Scalar>(
    pv: &ParamVector<F>,
    layout: &DesignLayout,
    ds: &Dataset<F>,
) -> Result<Vec<F>> {
    Ok(nll_value_grad(pv, layout, ds)?.1)
}

/// Objective value and gradient in one evaluation.
pub fn nll_value_grad<F: Scalar>(
    pv: &ParamVector<F>,
    layout: &DesignLayout,
    ds: &Dataset<F>,
) -> Result<(F, Vec<F>)> {
    let pl = layout.param_layout();
    let (value, sol) = laplace_nll_with_solution(pv, layout, ds, CurvatureMode::Auto)?;
    let nat = pv.natural();
    let sigma2 = nat.sigma * nat.sigma;
    let inv_s2 = sigma2.recip();
    let g = GMatrix::new(pv, layout)?;
    let nu = mult_covariate(&pv.beta, layout.centering);
    let y = ds.response();
    let n = layout.n_obs;
    let jn = layout.n_cells;
    let q = layout.q();
    let half = F::of(0.5);

    let mut grad = vec![F::zero(); pl.dim()];

    if q == 0 {
        // plain Gaussian regression
        let mut ssq = F::zero();
        for o in 0..n {
            let j = layout.obs_cell[o] as usize;
            let r = y[o] - pv.beta[j];
            grad[j] = grad[j] - r * inv_s2;
            ssq = ssq + r * r;
        }
        grad[pl.idx_log_sigma()] = F::of(n as f64) - ssq * inv_s2;
        return finish_gradient(value, grad);
    }

    let hinv = sol.inverse(layout);
    let w = &sol.w_tilde;

    // residuals at the mode
    let mut c = vec![F::zero(); n]; // r~ / sigma^2
    let mut ssq = F::zero();
    for o in 0..n {
        let j = layout.obs_cell[o] as usize;
        let mut mean = pv.beta[j];
        if layout.has_a {
            mean = mean + w[layout.idx_a(layout.obs_group[o] as usize)];
        }
        if layout.has_b {
            mean = mean + nu[j] * w[layout.idx_b(layout.obs_group[o] as usize)];
        }
        if layout.has_d {
            mean = mean + w[layout.idx_d(layout.obs_dcell[o] as usize)];
        }
        let r = y[o] - mean;
        ssq = ssq + r * r;
        c[o] = r * inv_s2;
    }

    // ---- beta ----
    // mean part: -sum_o c_o * d(mean_o)/d(beta_j)
    let mut q_cell = vec![F::zero(); jn];
    let mut p_sum = F::zero();
    for o in 0..n {
        let j = layout.obs_cell[o] as usize;
        let mut coef = F::one();
        if layout.has_b {
            let b_i = w[layout.idx_b(layout.obs_group[o] as usize)];
            coef = coef + b_i;
            p_sum = p_sum + c[o] * b_i;
        }
        q_cell[j] = q_cell[j] + c[o] * coef;
    }
    // trace part: d(Z'Z)/d(nu_l) touches (a_i,b_i), (b_i,b_i), (b_i,d_il)
    let mut tau = vec![F::zero(); jn];
    if layout.has_b {
        let two_inv_s2 = inv_s2 + inv_s2;
        for i in 0..layout.n_groups {
            let ib = layout.idx_b(i);
            let h_ab = if layout.has_a { hinv.get(layout.idx_a(i), ib) } else { F::zero() };
            let h_bb = hinv.get(ib, ib);
            for l in 0..jn {
                let n_il = layout.group_cell_counts[i * jn + l];
                if n_il == 0 {
                    continue;
                }
                let mut t = h_ab + nu[l] * h_bb;
                if layout.has_d {
                    t = t + hinv.get(ib, layout.idx_d(i * jn + l));
                }
                tau[l] = tau[l] + F::of(n_il as f64) * t * two_inv_s2;
            }
        }
    }
    let centered = matches!(layout.centering, crate::design::MpCentering::Centered);
    let tau_mean = if centered {
        let s: F = tau.iter().copied().sum();
        s / F::of(jn as f64)
    } else {
        F::zero()
    };
    let p_term = if centered { p_sum / F::of(jn as f64) } else { F::zero() };
    for j in 0..jn {
        grad[j] = -q_cell[j] + p_term + half * (tau[j] - tau_mean);
    }

    // ---- log sigma ----
    // tr(H^{-1} G^{-1})
    let mut tr_hg = F::zero();
    for i in 0..layout.n_groups {
        match layout.ab_width() {
            1 => {
                let ia = if layout.has_a { layout.idx_a(i) } else { layout.idx_b(i) };
                tr_hg = tr_hg + g.ab_inv[0] * hinv.get(ia, ia);
            }
            2 => {
                let ia = layout.idx_a(i);
                let ib = layout.idx_b(i);
                tr_hg = tr_hg
                    + g.ab_inv[0] * hinv.get(ia, ia)
                    + (g.ab_inv[1] + g.ab_inv[1]) * hinv.get(ia, ib)
                    + g.ab_inv[3] * hinv.get(ib, ib);
            }
            _ => {}
        }
    }
    let mut d_diag_sum = F::zero();
    if let Some(vd) = g.d_var {
        for cidx in 0..layout.q_d() {
            d_diag_sum = d_diag_sum + hinv.get(layout.idx_d(cidx), layout.idx_d(cidx));
        }
        tr_hg = tr_hg + d_diag_sum / vd;
    }
    grad[pl.idx_log_sigma()] = F::of(n as f64) - ssq * inv_s2 - F::of(q as f64) + tr_hg;

    // ---- (a, b) covariance parameters ----
    if layout.ab_width() > 0 {
        let group_modes = |i: usize| -> [F; 2] {
            match layout.ab_width() {
                1 => {
                    let idx = if layout.has_a { layout.idx_a(i) } else { layout.idx_b(i) };
                    [w[idx], F::zero()]
                }
                _ => [w[layout.idx_a(i)], w[layout.idx_b(i)]],
            }
        };
        let params: [(Option<usize>, AbDeriv); 3] = [
            (pl.idx_log_sigma_a(), AbDeriv::LogSigmaA),
            (pl.idx_log_sigma_b(), AbDeriv::LogSigmaB),
            (pl.idx_z_rho(), AbDeriv::ZRho),
        ];
        for (slot, which) in params {
            let Some(slot) = slot else { continue };
            let dcov = ab_cov_derivative(&nat, layout, which);
            // Sigma^{-1} dSigma and N = -Sigma^{-1} dSigma Sigma^{-1}
            let (tr_sinv_d, n_mat) = sandwich(&g, &dcov, layout.ab_width());
            let mut acc = half * F::of(layout.n_groups as f64) * tr_sinv_d;
            for i in 0..layout.n_groups {
                let u = group_modes(i);
                acc = acc
                    + half
                        * (u[0] * (n_mat[0] * u[0] + n_mat[1] * u[1])
                            + u[1] * (n_mat[2] * u[0] + n_mat[3] * u[1]));
                // trace over the block of H^{-1}
                match layout.ab_width() {
                    1 => {
                        let ia = if layout.has_a { layout.idx_a(i) } else { layout.idx_b(i) };
                        acc = acc + half * n_mat[0] * hinv.get(ia, ia);
                    }
                    _ => {
                        let ia = layout.idx_a(i);
                        let ib = layout.idx_b(i);
                        acc = acc
                            + half
                                * (n_mat[0] * hinv.get(ia, ia)
                                    + (n_mat[1] + n_mat[2]) * hinv.get(ia, ib)
                                    + n_mat[3] * hinv.get(ib, ib));
                    }
                }
            }
            grad[slot] = acc;
        }
    }

    // ---- log sigma_d ----
    if let (Some(slot), Some(vd)) = (pl.idx_log_sigma_d(), g.d_var) {
        let mut wd_sq = F::zero();
        for cidx in 0..layout.q_d() {
            let u = w[layout.idx_d(cidx)];
            wd_sq = wd_sq + u * u;
        }
        grad[slot] = F::of(layout.q_d() as f64) - wd_sq / vd - d_diag_sum / vd;
    }

    finish_gradient(value, grad)
}

fn finish_gradient<F: Scalar>(value: F, grad: Vec<F>) -> Result<(F, Vec<F>)> {
    if let Some(bad) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::GradientOverflow(bad));
    }
    Ok((value, grad))
}

#[derive(Clone, Copy)]
enum AbDeriv {
    LogSigmaA,
    LogSigmaB,
    ZRho,
}

/// dSigma/dp for the per-group covariance block, row-major 2x2 (or 1x1 in
/// slot 0 for width-1 blocks).
fn ab_cov_derivative<F: Scalar>(
    nat: &crate::design::NaturalParams<F>,
    layout: &DesignLayout,
    which: AbDeriv,
) -> [F; 4] {
    let two = F::of(2.0);
    let mut out = [F::zero(); 4];
    match (layout.has_a, layout.has_b) {
        (true, true) => {
            let sa = nat.sigma_a.unwrap();
            let sb = nat.sigma_b.unwrap();
            let rho = nat.rho.unwrap();
            match which {
                AbDeriv::LogSigmaA => {
                    out[0] = two * sa * sa;
                    out[1] = rho * sa * sb;
                    out[2] = out[1];
                }
                AbDeriv::LogSigmaB => {
                    out[3] = two * sb * sb;
                    out[1] = rho * sa * sb;
                    out[2] = out[1];
                }
                AbDeriv::ZRho => {
                    // d rho / d z = 1 - rho^2
                    let drho = F::one() - rho * rho;
                    out[1] = drho * sa * sb;
                    out[2] = out[1];
                }
            }
        }
        (true, false) => {
            if matches!(which, AbDeriv::LogSigmaA) {
                let sa = nat.sigma_a.unwrap();
                out[0] = two * sa * sa;
            }
        }
        (false, true) => {
            if matches!(which, AbDeriv::LogSigmaB) {
                let sb = nat.sigma_b.unwrap();
                out[0] = two * sb * sb;
            }
        }
        (false, false) => {}
    }
    out
}

/// Returns `tr(Sigma^{-1} dSigma)` and `N = -Sigma^{-1} dSigma Sigma^{-1}`.
fn sandwich<F: Scalar>(g: &GMatrix<F>, dcov: &[F; 4], width: usize) -> (F, [F; 4]) {
    match width {
        1 => {
            let sinv = g.ab_inv[0];
            let tr = sinv * dcov[0];
            let mut n = [F::zero(); 4];
            n[0] = -sinv * dcov[0] * sinv;
            (tr, n)
        }
        2 => {
            let si = &g.ab_inv;
            // A = Sigma^{-1} dSigma
            let a00 = si[0] * dcov[0] + si[1] * dcov[2];
            let a01 = si[0] * dcov[1] + si[1] * dcov[3];
            let a10 = si[2] * dcov[0] + si[3] * dcov[2];
            let a11 = si[2] * dcov[1] + si[3] * dcov[3];
            let tr = a00 + a11;
            // N = -A Sigma^{-1}
            let n = [
                -(a00 * si[0] + a01 * si[2]),
                -(a00 * si[1] + a01 * si[3]),
                -(a10 * si[0] + a11 * si[2]),
                -(a10 * si[1] + a11 * si[3]),
            ];
            (tr, n)
        }
        _ => (F::zero(), [F::zero(); 4]),
    }
}
