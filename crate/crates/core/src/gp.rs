//! Exact Gaussian-process regression with an anisotropic squared-exponential
//! kernel and a constant prior mean.
//!
//! Hyperparameters are optimised in log space: the parameter vector is
//! `(ln σ_f², ln ℓ_1, …, ln ℓ_d, ln σ²)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Scalar;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Bundle format written by [`GpPosterior::to_bundle`].
pub const GP_FORMAT_VERSION: u32 = 1;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;
const VARIANCE_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    #[serde(default)]
    pub prior_mean: f64,
}

impl KernelConfig {
    pub fn new(signal_var: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            signal_var,
            lengthscales,
            prior_mean: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.signal_var > 0.0
            && self.signal_var.is_finite()
            && !self.lengthscales.is_empty()
            && self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid kernel hyperparameters {self:?}")))
        }
    }

    #[cfg(test)]
    fn to_log_params(&self, noise_var: f64) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim() + 2);
        p.push(self.signal_var.ln());
        p.extend(self.lengthscales.iter().map(|l| l.ln()));
        p.push(noise_var.ln());
        p
    }

    fn from_log_params(p: &[f64], prior_mean: f64) -> (Self, f64) {
        let d = p.len() - 2;
        (
            Self {
                signal_var: p[0].exp(),
                lengthscales: p[1..=d].iter().map(|v| v.exp()).collect(),
                prior_mean,
            },
            p[d + 1].exp(),
        )
    }
}

/// Training inputs (one row per sample), targets and observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise_var: f64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, noise_var: f64) -> Result<Self> {
        if x.nrows() == 0 || x.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset needs n >= 1 rows matching targets ({} inputs, {} targets)",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidArgument("noise variance must be >= 0".into()));
        }
        Ok(Self { x, y, noise_var })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: &[f64], noise_var: f64) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("ragged input rows".into()));
        }
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(x, DVector::from_column_slice(y), noise_var)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// `σ_f² exp(−½ Σ (x_i − x'_i)² / ℓ_i²)`.
pub fn kernel_eval(cfg: &KernelConfig, x: &[f64], xp: &[f64]) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(xp)
        .zip(&cfg.lengthscales)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum();
    cfg.signal_var * (-0.5 * r2).exp()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub fn kernel_matrix(cfg: &KernelConfig, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = cfg.signal_var;
        for j in 0..i {
            let v = kernel_eval(cfg, &rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + σ²I + jitter·I`, escalating jitter ×100 from
/// `1e-10·tr(K)/n` up to `1e-6·tr(K)/n`.
fn factorize(k: &DMatrix<f64>, noise_var: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let scale = (k.trace() / n as f64).max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * scale;
        let mut ky = k.clone();
        for i in 0..n {
            ky[(i, i)] += noise_var + jitter;
        }
        if let Some(ch) = ky.cholesky() {
            return Ok((ch, jitter));
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        rel *= 100.0;
    }
}

/// Log marginal likelihood and its gradient in log-hyperparameter space.
pub fn log_marginal_likelihood(
    data: &Dataset,
    cfg: &KernelConfig,
    noise_var: f64,
) -> Result<(f64, DVector<f64>)> {
    cfg.validate()?;
    if cfg.dim() != data.dim() {
        return Err(Error::InvalidArgument("kernel/data dimension mismatch".into()));
    }
    let n = data.len();
    let k = kernel_matrix(cfg, &data.x);
    let (ch, _) = factorize(&k, noise_var)?;
    let resid = data.y.map(|v| v - cfg.prior_mean);
    let alpha = ch.solve(&resid);
    let log_det: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = -0.5 * resid.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = ααᵀ − K_y⁻¹; ∂LML/∂p = ½ tr(W ∂K_y/∂p)
    let kinv = ch.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let d = cfg.dim();
    let mut grad = DVector::zeros(d + 2);
    let mut g_sf = 0.0;
    let mut g_len = vec![0.0; d];
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * k[(i, j)];
            g_sf += wk;
            if i != j {
                for (l, gl) in g_len.iter_mut().enumerate() {
                    let diff = (data.x[(i, l)] - data.x[(j, l)]) / cfg.lengthscales[l];
                    *gl += wk * diff * diff;
                }
            }
        }
    }
    grad[0] = 0.5 * g_sf;
    for l in 0..d {
        grad[1 + l] = 0.5 * g_len[l];
    }
    grad[d + 1] = 0.5 * noise_var * w.trace();
    Ok((value, grad))
}

/// Result of hyperparameter training.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperFit {
    pub kernel: KernelConfig,
    pub noise_var: f64,
    pub lml: f64,
    pub grad_norm: f64,
    pub restarts_ok: usize,
}

/// Box on the log-hyperparameters used during optimisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperBounds {
    pub signal_var: (f64, f64),
    pub lengthscale: (f64, f64),
    pub noise_var: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self {
            signal_var: (1e-8, 1e6),
            lengthscale: (1e-4, 1e3),
            noise_var: (1e-10, 1e4),
        }
    }
}

impl HyperBounds {
    fn log_box(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.signal_var.0.ln()];
        let mut hi = vec![self.signal_var.1.ln()];
        lo.extend(std::iter::repeat_n(self.lengthscale.0.ln(), d));
        hi.extend(std::iter::repeat_n(self.lengthscale.1.ln(), d));
        lo.push(self.noise_var.0.ln());
        hi.push(self.noise_var.1.ln());
        (lo, hi)
    }
}

/// Options for [`fit_hyperparams_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub bounds: HyperBounds,
    pub exec: Exec,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            seed: 0,
            max_iter: 400,
            grad_tol: 1e-7,
            bounds: HyperBounds::default(),
            exec: Exec::Parallel,
        }
    }
}

/// Maximises the log marginal likelihood from `restarts` log-uniform starts.
pub fn fit_hyperparams(data: &Dataset, restarts: usize) -> Result<HyperFit> {
    fit_hyperparams_with(
        data,
        &FitOptions {
            restarts,
            ..FitOptions::default()
        },
    )
}

pub fn fit_hyperparams_with(data: &Dataset, opts: &FitOptions) -> Result<HyperFit> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("hyperparameter training needs n >= 2".into()));
    }
    let d = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln());
    let starts: Vec<Vec<f64>> = (0..opts.restarts.max(1))
        .map(|_| {
            let mut p = vec![log_uniform(&mut rng, 1e-4, 100.0)];
            p.extend((0..d).map(|_| log_uniform(&mut rng, 1e-3, 10.0)));
            p.push(log_uniform(&mut rng, 1e-8, 1.0));
            p
        })
        .collect();
    let (lo, hi) = opts.bounds.log_box(d);
    let results = par::map(opts.exec, &starts, |p0| {
        maximize_lml(data, p0, &lo, &hi, opts.max_iter, opts.grad_tol)
    });
    let ok: Vec<_> = results.into_iter().flatten().collect();
    let restarts_ok = ok.len();
    // ties broken by restart index, which keeps the choice deterministic
    let best = ok
        .into_iter()
        .fold(None::<(Vec<f64>, f64, f64)>, |acc, r| match acc {
            Some(a) if a.1 >= r.1 => Some(a),
            _ => Some(r),
        })
        .ok_or_else(|| Error::TrainingFailed("no restart produced a factorizable kernel".into()))?;
    let (kernel, noise_var) = KernelConfig::from_log_params(&best.0, 0.0);
    Ok(HyperFit {
        kernel,
        noise_var,
        lml: best.1,
        grad_norm: best.2,
        restarts_ok,
    })
}

fn projected_grad(p: &[f64], g: &DVector<f64>, lo: &[f64], hi: &[f64]) -> DVector<f64> {
    DVector::from_fn(p.len(), |i, _| {
        let at_lo = p[i] <= lo[i] + 1e-12 && g[i] < 0.0;
        let at_hi = p[i] >= hi[i] - 1e-12 && g[i] > 0.0;
        if at_lo || at_hi {
            0.0
        } else {
            g[i]
        }
    })
}

/// Projected BFGS ascent with Armijo backtracking. Returns
/// `(log-params, lml, projected gradient norm)`.
fn maximize_lml(
    data: &Dataset,
    p0: &[f64],
    lo: &[f64],
    hi: &[f64],
    max_iter: usize,
    grad_tol: f64,
) -> Option<(Vec<f64>, f64, f64)> {
    let eval = |p: &[f64]| {
        let (cfg, nv) = KernelConfig::from_log_params(p, 0.0);
        log_marginal_likelihood(data, &cfg, nv).ok()
    };
    let clamp = |p: &mut Vec<f64>| {
        for i in 0..p.len() {
            p[i] = p[i].clamp(lo[i], hi[i]);
        }
    };
    let m = p0.len();
    let mut p = p0.to_vec();
    clamp(&mut p);
    let (mut f, mut g) = eval(&p)?;
    let mut hinv = DMatrix::<f64>::identity(m, m);
    for _ in 0..max_iter {
        let pg = projected_grad(&p, &g, lo, hi);
        if pg.norm() < grad_tol {
            break;
        }
        // ascent direction restricted to free coordinates
        let free: Vec<bool> = (0..m).map(|i| pg[i] != 0.0 || g[i] == 0.0).collect();
        let mut dir = &hinv * &pg;
        for i in 0..m {
            if !free[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&pg) <= 0.0 {
            hinv = DMatrix::identity(m, m);
            dir = pg.clone();
        }
        let max_step = 3.0 / dir.amax().max(1e-300);
        let mut step = 1.0f64.min(max_step);
        let mut accepted = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = p.iter().zip(dir.iter()).map(|(a, b)| a + step * b).collect();
            clamp(&mut cand);
            if let Some((fc, gc)) = eval(&cand) {
                let moved: f64 = cand.iter().zip(&p).zip(pg.iter()).map(|((c, a), gi)| (c - a) * gi).sum();
                if fc >= f + 1e-4 * moved && fc.is_finite() {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        let s = DVector::from_iterator(m, cand.iter().zip(&p).map(|(a, b)| a - b));
        // BFGS on −LML: y = ∇(−f)_new − ∇(−f)_old
        let y = -(&gc - &g);
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(m, m);
            let a = &id - rho * &s * y.transpose();
            let b = &id - rho * &y * s.transpose();
            hinv = &a * &hinv * &b + rho * &s * s.transpose();
        }
        let converged_f = (fc - f).abs() < 1e-14 * (1.0 + f.abs());
        p = cand;
        f = fc;
        g = gc;
        if converged_f && projected_grad(&p, &g, lo, hi).norm() < grad_tol * 1e3 {
            break;
        }
    }
    let gn = projected_grad(&p, &g, lo, hi).norm();
    Some((p, f, gn))
}

/// Trained GP with a cached factorisation.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub kernel: KernelConfig,
    pub noise_var: f64,
    pub jitter: f64,
    pub x: DMatrix<f64>,
    pub alpha: DVector<f64>,
    /// lower-triangular factor of `K + σ²I + jitter·I`
    pub chol: DMatrix<f64>,
    // row-major copy of `x` and inverse squared lengthscales for the hot path
    rows: Vec<f64>,
    inv_l2: Vec<f64>,
}

/// Posterior mean and variance at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub var: f64,
}

impl Prediction {
    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

pub fn build_posterior(data: &Dataset, cfg: &KernelConfig, noise_var: f64) -> Result<GpPosterior> {
    cfg.validate()?;
    if cfg.dim() != data.dim() {
        return Err(Error::InvalidArgument("kernel/data dimension mismatch".into()));
    }
    let k = kernel_matrix(cfg, &data.x);
    let (ch, jitter) = factorize(&k, noise_var)?;
    let resid = data.y.map(|v| v - cfg.prior_mean);
    let alpha = ch.solve(&resid);
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posterior weights"));
    }
    Ok(GpPosterior::assemble(cfg.clone(), noise_var, jitter, data.x.clone(), alpha, ch.l()))
}

impl GpPosterior {
    fn assemble(
        kernel: KernelConfig,
        noise_var: f64,
        jitter: f64,
        x: DMatrix<f64>,
        alpha: DVector<f64>,
        chol: DMatrix<f64>,
    ) -> Self {
        let d = x.ncols();
        let rows = (0..x.nrows()).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| x[(i, j)]).collect();
        let inv_l2 = kernel.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        Self {
            kernel,
            noise_var,
            jitter,
            x,
            alpha,
            chol,
            rows,
            inv_l2,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn cross_cov(&self, xs: &[f64]) -> DVector<f64> {
        let d = self.dim();
        DVector::from_fn(self.len(), |i, _| {
            let r = &self.rows[i * d..(i + 1) * d];
            let r2: f64 = (0..d).map(|j| (xs[j] - r[j]).powi(2) * self.inv_l2[j]).sum();
            self.kernel.signal_var * (-0.5 * r2).exp()
        })
    }

    /// Posterior mean `m(x*) + kᵀα`.
    pub fn mean(&self, xs: &[f64]) -> f64 {
        self.kernel.prior_mean + self.cross_cov(xs).dot(&self.alpha)
    }

    /// Posterior mean and variance; variances in `(−1e-10, 0)` clamp to 0.
    pub fn predict(&self, xs: &[f64]) -> Result<Prediction> {
        if xs.len() != self.dim() || xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("query point has wrong dimension or is not finite".into()));
        }
        let k = self.cross_cov(xs);
        let mean = self.kernel.prior_mean + k.dot(&self.alpha);
        let v = self
            .chol
            .solve_lower_triangular(&k)
            .ok_or(Error::NonFinite("triangular solve"))?;
        let var = self.kernel.signal_var - v.norm_squared();
        let var = if var >= 0.0 {
            var
        } else if var > -VARIANCE_CLAMP * self.kernel.signal_var.max(1.0) {
            0.0
        } else {
            return Err(Error::NegativeVariance(var));
        };
        Ok(Prediction { mean, var })
    }

    /// Posterior mean and its gradient with respect to the query point.
    pub fn mean_and_gradient(&self, xs: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim();
        let mut grad = vec![0.0; d];
        let mut m = 0.0;
        for i in 0..self.len() {
            let r = &self.rows[i * d..(i + 1) * d];
            let r2: f64 = (0..d).map(|j| (xs[j] - r[j]).powi(2) * self.inv_l2[j]).sum();
            let w = self.alpha[i] * self.kernel.signal_var * (-0.5 * r2).exp();
            m += w;
            for j in 0..d {
                grad[j] -= w * (xs[j] - r[j]) * self.inv_l2[j];
            }
        }
        (self.kernel.prior_mean + m, grad)
    }

    /// Posterior mean for generic scalars (dual numbers in the optimiser).
    pub fn mean_generic<D: Scalar>(&self, xs: &[D]) -> D {
        let d = self.dim();
        let mut m = D::zero();
        for i in 0..self.len() {
            let r = &self.rows[i * d..(i + 1) * d];
            let mut r2 = D::zero();
            for j in 0..d {
                let diff = xs[j] - r[j];
                r2 += diff * diff * self.inv_l2[j];
            }
            m += (r2 * -0.5).exp() * (self.alpha[i] * self.kernel.signal_var);
        }
        m + self.kernel.prior_mean
    }

    pub fn to_bundle(&self) -> GpBundle {
        let n = self.len();
        GpBundle {
            format_version: GP_FORMAT_VERSION,
            kernel: self.kernel.clone(),
            noise_var: self.noise_var,
            jitter: self.jitter,
            x: (0..n).map(|i| row(&self.x, i)).collect(),
            alpha: self.alpha.iter().copied().collect(),
            chol: (0..n).map(|i| (0..=i).map(|j| self.chol[(i, j)]).collect()).collect(),
        }
    }

    pub fn from_bundle(b: &GpBundle) -> Result<Self> {
        if b.format_version != GP_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported GP bundle version {} (expected {GP_FORMAT_VERSION})",
                b.format_version
            )));
        }
        b.kernel.validate()?;
        let n = b.x.len();
        let d = b.kernel.dim();
        if n == 0 || b.alpha.len() != n || b.chol.len() != n || b.x.iter().any(|r| r.len() != d) {
            return Err(Error::Config("GP bundle has inconsistent sizes".into()));
        }
        if b.chol.iter().enumerate().any(|(i, r)| r.len() != i + 1) {
            return Err(Error::Config("GP bundle factor is not lower-triangular".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| b.x[i][j]);
        let chol = DMatrix::from_fn(n, n, |i, j| if j <= i { b.chol[i][j] } else { 0.0 });
        Ok(Self::assemble(
            b.kernel.clone(),
            b.noise_var,
            b.jitter,
            x,
            DVector::from_column_slice(&b.alpha),
            chol,
        ))
    }
}

/// Serialisable form of a [`GpPosterior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpBundle {
    pub format_version: u32,
    pub kernel: KernelConfig,
    pub noise_var: f64,
    pub jitter: f64,
    pub x: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub chol: Vec<Vec<f64>>,
}

/// Greedy cover: keeps a point if it is at least `min_dist` away from every
/// point kept so far, scanning in input order.
pub fn subsample_by_distance(points: &[Vec<f64>], min_dist: f64) -> Result<Vec<usize>> {
    if !(min_dist > 0.0) {
        return Err(Error::InvalidArgument("min_dist must be positive".into()));
    }
    let md2 = min_dist * min_dist;
    let mut kept: Vec<usize> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let far = kept.iter().all(|&k| {
            let d2: f64 = p.iter().zip(&points[k]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 >= md2
        });
        if far {
            kept.push(i);
        }
    }
    Ok(kept)
}
