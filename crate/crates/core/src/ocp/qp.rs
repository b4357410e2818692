//! Dense convex QP solved with Mehrotra's predictor-corrector
//! interior-point method:
//!
//! ```text
//! min ½ xᵀHx + gᵀx   s.t.  lo ≤ A x ≤ hi,  lb ≤ x ≤ ub
//! ```
//!
//! Infinite bounds are allowed and simply dropped.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl DenseQp {
    /// Unconstrained problem with `n` variables.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a: DMatrix::zeros(0, n),
            lo: Vec::new(),
            hi: Vec::new(),
            lb: vec![f64::NEG_INFINITY; n],
            ub: vec![f64::INFINITY; n],
        }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// net multiplier of each general row (lower side minus upper side)
    pub y_rows: Vec<f64>,
    /// net multiplier of each simple bound
    pub y_bounds: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-9 }
    }
}

#[derive(Clone, Copy)]
enum Side {
    Row(usize, f64),
    Bound(usize, f64),
}

struct Ineq {
    side: Side,
    d: f64,
}

/// Constraint weight λ/s above which a constraint is kept out of the
/// condensed matrix.
const STIFF: f64 = 1e4;

pub fn solve_qp(qp: &DenseQp, opts: &QpOptions) -> Result<QpSolution> {
    let n = qp.g.len();
    let nr = qp.a.nrows();
    if qp.h.shape() != (n, n) || qp.a.ncols() != n || qp.lo.len() != nr || qp.hi.len() != nr {
        return Err(Error::InvalidArgument("QP dimensions are inconsistent".into()));
    }
    if qp.lb.len() != n || qp.ub.len() != n {
        return Err(Error::InvalidArgument("QP bound vectors have the wrong length".into()));
    }
    // solve a copy scaled so that objective coefficients and row norms are O(1)
    let obj_scale = qp.h.amax().max(1.0);
    let row_scale: Vec<f64> = (0..nr)
        .map(|i| {
            let r = qp.a.row(i).amax();
            if r > 0.0 { 1.0 / r } else { 1.0 }
        })
        .collect();
    let h = &qp.h / obj_scale;
    let g = &qp.g / obj_scale;
    let a = DMatrix::from_fn(nr, n, |i, j| qp.a[(i, j)] * row_scale[i]);
    let at = a.transpose();
    let mut ineqs = Vec::new();
    for i in 0..nr {
        if qp.lo[i] > qp.hi[i] {
            return Err(Error::QpFailed(format!("row {i} has lo > hi")));
        }
        if qp.lo[i].is_finite() {
            ineqs.push(Ineq { side: Side::Row(i, 1.0), d: qp.lo[i] * row_scale[i] });
        }
        if qp.hi[i].is_finite() {
            ineqs.push(Ineq { side: Side::Row(i, -1.0), d: -qp.hi[i] * row_scale[i] });
        }
    }
    for j in 0..n {
        if qp.lb[j] > qp.ub[j] {
            return Err(Error::QpFailed(format!("variable {j} has lb > ub")));
        }
        if qp.lb[j].is_finite() {
            ineqs.push(Ineq { side: Side::Bound(j, 1.0), d: qp.lb[j] });
        }
        if qp.ub[j].is_finite() {
            ineqs.push(Ineq { side: Side::Bound(j, -1.0), d: -qp.ub[j] });
        }
    }
    let m = ineqs.len();
    let reg = 1e-12 * (1.0 + h.diagonal().amax());

    if m == 0 {
        let mut k = h.clone();
        for i in 0..n {
            k[(i, i)] += reg;
        }
        let ch = k.cholesky().ok_or_else(|| Error::QpFailed("Hessian is not positive definite".into()))?;
        return Ok(QpSolution {
            x: ch.solve(&(-&g)),
            y_rows: vec![0.0; nr],
            y_bounds: vec![0.0; n],
            iterations: 1,
        });
    }

    // rows first, then variable bounds
    let group = |q: &Ineq| match q.side {
        Side::Row(i, _) => i,
        Side::Bound(j, _) => nr + j,
    };
    let cx = |ax: &DVector<f64>, x: &DVector<f64>, q: &Ineq| match q.side {
        Side::Row(i, s) => s * ax[i],
        Side::Bound(j, s) => s * x[j],
    };
    // Cᵀv accumulated into an n-vector
    let ct = |v: &[f64]| {
        let mut row_w = DVector::zeros(nr);
        let mut out = DVector::zeros(n);
        for (q, vi) in ineqs.iter().zip(v) {
            match q.side {
                Side::Row(i, s) => row_w[i] += s * vi,
                Side::Bound(j, s) => out[j] += s * vi,
            }
        }
        if nr > 0 {
            out += a.tr_mul(&row_w);
        }
        out
    };

    // least-squares start: (H + CᵀC) x = −g + Cᵀd, slacks and multipliers
    // from the residual, then shifted to be strictly positive
    let mut k0 = h.clone();
    let mut row_count = vec![0.0; nr];
    for q in &ineqs {
        match q.side {
            Side::Row(i, _) => row_count[i] += 1.0,
            Side::Bound(j, _) => k0[(j, j)] += 1.0,
        }
    }
    if nr > 0 {
        k0 += a.tr_mul(&DMatrix::from_fn(nr, n, |i, j| a[(i, j)] * row_count[i]));
    }
    for i in 0..n {
        k0[(i, i)] += reg.max(1e-8);
    }
    let d: Vec<f64> = ineqs.iter().map(|q| q.d).collect();
    let mut x = k0
        .cholesky()
        .ok_or_else(|| Error::QpFailed("start system is not positive definite".into()))?
        .solve(&(ct(&d) - &g));
    let mut ax = &a * &x;
    let resid: Vec<f64> = ineqs.iter().map(|q| cx(&ax, &x, q) - q.d).collect();
    let shift = |v: Vec<f64>| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        if lo < 1.0 {
            v.into_iter().map(|vi| vi + 1.0 - lo).collect()
        } else {
            v
        }
    };
    let mut s: Vec<f64> = shift(resid.clone());
    let mut lam: Vec<f64> = shift(resid.iter().map(|r| -r).collect());

    let data_scale = 1.0 + ineqs.iter().map(|q| q.d.abs()).fold(0.0, f64::max);

    for iter in 1..=opts.max_iter {
        let hx = &h * &x;
        let cl = ct(&lam);
        let rd = &hx + &g - &cl;
        let rp: Vec<f64> = ineqs.iter().zip(&s).map(|(q, si)| cx(&ax, &x, q) - si - q.d).collect();
        let mu = s.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>() / m as f64;
        let rp_inf = rp.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // stationarity relative to the size of the terms in each component
        let rd_ok = (0..n).all(|j| rd[j].abs() <= opts.tol * (1.0 + hx[j].abs() + g[j].abs() + cl[j].abs()));
        if rd_ok && rp_inf <= opts.tol * data_scale && mu <= opts.tol {
            return Ok(finish(x, &ineqs, &lam, &row_scale, obj_scale, iter));
        }

        // Newton system H + Cᵀ diag(λ/s) C. Constraint groups (a row or a
        // variable bound) with a large weight stay in augmented form
        // [K, Aₛᵀ; Aₛ, −W⁻¹]; their multiplier steps are then taken from the
        // augmented unknowns instead of the cancellation-prone λ/s·C·dx.
        let mut weight = vec![0.0; nr + n];
        for (idx, q) in ineqs.iter().enumerate() {
            weight[group(q)] += lam[idx] / s[idx];
        }
        let stiff: Vec<usize> = (0..nr).filter(|&gi| weight[gi] > STIFF).collect();
        let mut slot = vec![usize::MAX; nr + n];
        for (r, &gi) in stiff.iter().enumerate() {
            slot[gi] = r;
        }
        let mut k = h.clone();
        if nr > 0 {
            // Aᵀ W A through a blocked product; stiff rows get weight zero
            let at_w = DMatrix::from_fn(n, nr, |j, i| if slot[i] == usize::MAX { at[(j, i)] * weight[i] } else { 0.0 });
            k.gemm(1.0, &at_w, &a, 1.0);
        }
        for j in 0..n {
            if slot[nr + j] == usize::MAX {
                k[(j, j)] += weight[nr + j];
            }
            k[(j, j)] += reg;
        }
        let na = stiff.len();
        // escalate the diagonal shift when round-off breaks definiteness
        let kmax = k.diagonal().amax().max(1.0);
        let mut shift = 0.0;
        let ch = loop {
            let mut kk = k.clone();
            for i in 0..n {
                kk[(i, i)] += shift;
            }
            if let Some(c) = kk.clone().cholesky() {
                k = kk;
                break c;
            }
            shift = if shift == 0.0 { reg.max(1e-14 * kmax) } else { shift * 1e3 };
            if shift > 1e-6 * kmax {
                return Err(Error::QpFailed(format!("normal matrix lost definiteness at iteration {iter}")));
            }
        };
        // Schur complement S = Aₛ K⁻¹ Aₛᵀ + W⁻¹ of the stiff rows
        let a_s = DMatrix::from_fn(na, n, |r, j| a[(stiff[r], j)]);
        let y = ch.solve(&a_s.transpose());
        let mut sc = &a_s * &y;
        for (r, &gi) in stiff.iter().enumerate() {
            sc[(r, r)] += 1.0 / weight[gi];
        }
        // nearly dependent stiff rows leave S singular to round-off; a small
        // dual shift is corrected by the refinement step below
        let sch = if na > 0 {
            let smax = sc.diagonal().amax();
            let mut shift = 0.0;
            loop {
                let mut ss = sc.clone();
                for r in 0..na {
                    ss[(r, r)] += shift;
                }
                if let Some(c) = ss.cholesky() {
                    break Some(c);
                }
                shift = if shift == 0.0 { 1e-14 * smax } else { shift * 1e3 };
                if shift > 1e-6 * smax {
                    return Err(Error::QpFailed(format!("stiff-row system singular at iteration {iter}")));
                }
            }
        } else {
            None
        };
        // [K, Aₛᵀ; Aₛ, −W⁻¹] [dx; z] = [r1; r2]
        let solve_aug = |r1: &DVector<f64>, r2: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            match &sch {
                None => (ch.solve(r1), DVector::zeros(0)),
                Some(sf) => {
                    let z = sf.solve(&(&a_s * ch.solve(r1) - r2));
                    let dx = ch.solve(&(r1 - a_s.tr_mul(&z)));
                    (dx, z)
                }
            }
        };
        let winv = DVector::from_fn(na, |r, _| 1.0 / weight[stiff[r]]);

        let direction = |rc: &[f64]| -> Result<(DVector<f64>, Vec<f64>, Vec<f64>)> {
            let v: Vec<f64> = (0..m).map(|i| (rc[i] + lam[i] * rp[i]) / s[i]).collect();
            let r1 = -&rd - ct(&v);
            let r2 = DVector::zeros(na);
            let (mut dx, mut z) = solve_aug(&r1, &r2);
            // one step of iterative refinement
            let e1 = &r1 - &k * &dx - a_s.tr_mul(&z);
            let e2 = &r2 - (&a_s * &dx - winv.component_mul(&z));
            let (cx1, cz) = solve_aug(&e1, &e2);
            dx += cx1;
            z += cz;
            if dx.iter().chain(z.iter()).any(|v| !v.is_finite()) {
                return Err(Error::QpFailed(format!("Newton system singular at iteration {iter}")));
            }
            let adx = &a * &dx;
            let mut ds = vec![0.0; m];
            let mut dl = vec![0.0; m];
            for (i, q) in ineqs.iter().enumerate() {
                let gi = group(q);
                if slot[gi] == usize::MAX {
                    ds[i] = cx(&adx, &dx, q) + rp[i];
                    dl[i] = -(rc[i] + lam[i] * ds[i]) / s[i];
                } else {
                    let sign = match q.side {
                        Side::Row(_, sg) | Side::Bound(_, sg) => sg,
                    };
                    let zi = z[slot[gi]];
                    dl[i] = -v[i] - sign * (lam[i] / s[i]) / weight[gi] * zi;
                    ds[i] = -(rc[i] + s[i] * dl[i]) / lam[i];
                }
            }
            Ok((dx, ds, dl))
        };
        let max_step = |v: &[f64], dv: &[f64]| {
            v.iter()
                .zip(dv)
                .filter(|(_, d)| **d < 0.0)
                .fold(1.0f64, |a, (vi, d)| a.min(-vi / d))
        };

        let rc_aff: Vec<f64> = s.iter().zip(&lam).map(|(a, b)| a * b).collect();
        let (_, ds_a, dl_a) = direction(&rc_aff)?;
        let a_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
        let mu_aff = (0..m)
            .map(|i| (s[i] + a_aff * ds_a[i]) * (lam[i] + a_aff * dl_a[i]))
            .sum::<f64>()
            / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let rc: Vec<f64> = (0..m).map(|i| s[i] * lam[i] + ds_a[i] * dl_a[i] - sigma * mu).collect();
        let (dx, ds, dl) = direction(&rc)?;
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);
        x += alpha * &dx;
        ax = &a * &x;
        for i in 0..m {
            s[i] = (s[i] + alpha * ds[i]).max(1e-300);
            lam[i] = (lam[i] + alpha * dl[i]).max(1e-300);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::QpFailed("iterate became non-finite".into()));
        }
    }
    Err(Error::QpFailed(format!("no convergence in {} iterations", opts.max_iter)))
}

fn finish(x: DVector<f64>, ineqs: &[Ineq], lam: &[f64], row_scale: &[f64], obj_scale: f64, iterations: usize) -> QpSolution {
    let mut y_rows = vec![0.0; row_scale.len()];
    let mut y_bounds = vec![0.0; x.len()];
    for (q, l) in ineqs.iter().zip(lam) {
        match q.side {
            Side::Row(i, s) => y_rows[i] += s * l * obj_scale * row_scale[i],
            Side::Bound(j, s) => y_bounds[j] += s * l * obj_scale,
        }
    }
    QpSolution { x, y_rows, y_bounds, iterations }
}
