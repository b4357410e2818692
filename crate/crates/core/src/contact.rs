//! Contact-force output models: linear spring, nonlinear spring and a
//! spring plus GP residual, together with penetration geometry and
//! identification from `(q, δ, F̂)` samples.

use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_kinematics, forward_kinematics_generic, Pose, RobotGeometry, Scalar};
use crate::error::{Error, Result};
use crate::gp::{self, Dataset, FitOptions, GpBundle, GpPosterior};

/// Planar compliant surface. The material occupies the half-space the
/// inward normal `normal` points into; the plane passes through `p0·|n|`
/// (componentwise), i.e. the point at coordinate `p0` on the normal's axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceGeometry {
    pub normal: [f64; 3],
    pub p0: f64,
}

impl Default for SurfaceGeometry {
    fn default() -> Self {
        Self {
            normal: [-1.0, 0.0, 0.0],
            p0: -0.49,
        }
    }
}

impl SurfaceGeometry {
    pub fn validate(&self) -> Result<()> {
        let norm: f64 = self.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 || !self.p0.is_finite() {
            return Err(Error::InvalidArgument(format!("surface normal must be a unit vector, got {:?}", self.normal)));
        }
        Ok(())
    }

    /// Signed penetration `n·(p − p0|n|)`: positive inside the material.
    pub fn signed_penetration<D: Scalar>(&self, p: &[D; 3]) -> D {
        let mut s = D::zero();
        for i in 0..3 {
            s += (p[i] - self.p0 * self.normal[i].abs()) * self.normal[i];
        }
        s
    }
}

/// Penetration depth `δ ≥ 0`; exactly 0 out of contact.
pub fn penetration_depth(pose: &Pose, surf: &SurfaceGeometry) -> f64 {
    surf.signed_penetration(&pose.p).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookModel {
    /// stiffness [N/m]
    pub k_e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HertzModel {
    /// stiffness [N/m^α]
    pub k_e: f64,
    pub alpha: f64,
}

/// Spring part plus a GP on the residual over joint angles.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub hook: HookModel,
    pub gp: GpPosterior,
}

pub fn force_hook(m: &HookModel, delta: f64) -> f64 {
    m.k_e * delta
}

pub fn force_hertz(m: &HertzModel, delta: f64) -> f64 {
    if delta <= 0.0 {
        0.0
    } else {
        m.k_e * (m.alpha * delta.ln()).exp()
    }
}

/// Mean and standard deviation of the hybrid model at joint angles `q`.
pub fn force_hybrid(m: &HybridModel, q: &[f64; 3], geom: &RobotGeometry, surf: &SurfaceGeometry) -> Result<(f64, f64)> {
    let delta = penetration_depth(&forward_kinematics(q, geom), surf);
    let p = m.gp.predict(q)?;
    Ok((force_hook(&m.hook, delta) + p.mean, p.std()))
}

/// Any of the three output models.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceModel {
    Hook(HookModel),
    Hertz(HertzModel),
    Hybrid(HybridModel),
}

impl ForceModel {
    pub fn name(&self) -> &'static str {
        match self {
            ForceModel::Hook(_) => "hook",
            ForceModel::Hertz(_) => "hertz",
            ForceModel::Hybrid(_) => "hybrid",
        }
    }

    /// Mean normal force and its standard deviation (0 for the springs).
    pub fn predict(&self, q: &[f64; 3], geom: &RobotGeometry, surf: &SurfaceGeometry) -> Result<(f64, f64)> {
        match self {
            ForceModel::Hook(m) => Ok((force_hook(m, penetration_depth(&forward_kinematics(q, geom), surf)), 0.0)),
            ForceModel::Hertz(m) => Ok((force_hertz(m, penetration_depth(&forward_kinematics(q, geom), surf)), 0.0)),
            ForceModel::Hybrid(m) => force_hybrid(m, q, geom, surf),
        }
    }

    pub fn std(&self, q: &[f64; 3]) -> Result<f64> {
        match self {
            ForceModel::Hybrid(m) => Ok(m.gp.predict(q)?.std()),
            _ => Ok(0.0),
        }
    }

    /// Smooth mean force used inside the optimiser.
    ///
    /// The penetration is not clamped: the linear spring is extended
    /// linearly and the nonlinear spring oddly to negative penetration, so
    /// the prediction stays differentiable through contact loss.
    pub fn smooth_mean<D: Scalar>(&self, q: &[D; 3], geom: &RobotGeometry, surf: &SurfaceGeometry) -> D {
        let s = surf.signed_penetration(&forward_kinematics_generic(q, geom));
        match self {
            ForceModel::Hook(m) => s * m.k_e,
            ForceModel::Hertz(m) => odd_power(s, m.alpha) * m.k_e,
            ForceModel::Hybrid(m) => s * m.hook.k_e + m.gp.mean_generic(q),
        }
    }
}

fn odd_power<D: Scalar>(s: D, alpha: f64) -> D {
    let r = s.re();
    if r > 0.0 {
        s.powf(alpha)
    } else if r < 0.0 {
        -(-s).powf(alpha)
    } else if alpha == 1.0 {
        s
    } else {
        s * 0.0
    }
}

/// One identification sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactSample {
    pub q: [f64; 3],
    pub delta: f64,
    pub force: f64,
}

/// Least squares through the origin.
pub fn fit_hook(samples: &[ContactSample]) -> Result<HookModel> {
    let sdf: f64 = samples.iter().map(|s| s.delta * s.force).sum();
    let sdd: f64 = samples.iter().map(|s| s.delta * s.delta).sum();
    if !(sdd > 0.0) {
        return Err(Error::Identification("linear spring needs a sample with positive penetration".into()));
    }
    Ok(HookModel { k_e: sdf / sdd })
}

fn hertz_sse(samples: &[ContactSample], k: f64, alpha: f64) -> f64 {
    let m = HertzModel { k_e: k, alpha };
    samples.iter().map(|s| (force_hertz(&m, s.delta) - s.force).powi(2)).sum()
}

const HERTZ_MAX_ITER: usize = 100;
const HERTZ_REL_TOL: f64 = 1e-10;

/// Two-stage nonlinear-spring identification: a log-linear regression on
/// the samples with `δ > 0, F̂ > 0`, refined by Gauss-Newton on the force
/// residuals of all samples. `alpha_lock` fixes the exponent.
pub fn fit_hertz(samples: &[ContactSample], alpha_lock: Option<f64>) -> Result<HertzModel> {
    let logs: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.delta > 0.0 && s.force > 0.0)
        .map(|s| (s.delta.ln(), s.force.ln()))
        .collect();
    let need = if alpha_lock.is_some() { 1 } else { 2 };
    if logs.len() < need {
        return Err(Error::Identification(format!(
            "nonlinear spring needs {need} samples with positive penetration and force, got {}",
            logs.len()
        )));
    }
    let n = logs.len() as f64;
    let (mx, my) = logs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (alpha0, lnk0) = match alpha_lock {
        Some(a) => {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument("locked exponent must be positive".into()));
            }
            (a, my - a * mx)
        }
        None => {
            let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
            if !(sxx > 0.0) {
                return Err(Error::Identification("penetration samples are all equal".into()));
            }
            let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
            let a = sxy / sxx;
            (a, my - a * mx)
        }
    };

    // Gauss-Newton in (ln K, α)
    let mut lnk = lnk0;
    let mut alpha = alpha0;
    let mut sse = hertz_sse(samples, lnk.exp(), alpha);
    for _ in 0..HERTZ_MAX_ITER {
        let (mut h11, mut h12, mut h22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in samples.iter().filter(|s| s.delta > 0.0) {
            let f = (lnk + alpha * s.delta.ln()).exp();
            let r = f - s.force;
            let j1 = f;
            let j2 = f * s.delta.ln();
            h11 += j1 * j1;
            h12 += j1 * j2;
            h22 += j2 * j2;
            g1 += j1 * r;
            g2 += j2 * r;
        }
        let (d1, d2) = if alpha_lock.is_some() {
            if h11 <= 0.0 {
                break;
            }
            (-g1 / h11, 0.0)
        } else {
            let det = h11 * h22 - h12 * h12;
            if !(det > 0.0) {
                break;
            }
            (-(h22 * g1 - h12 * g2) / det, -(h11 * g2 - h12 * g1) / det)
        };
        let mut step = 1.0;
        let mut improved = None;
        for _ in 0..30 {
            let (lk, a) = (lnk + step * d1, alpha + step * d2);
            let cand = hertz_sse(samples, lk.exp(), a);
            if cand.is_finite() && cand <= sse && a > 0.0 {
                improved = Some((lk, a, cand));
                break;
            }
            step *= 0.5;
        }
        let Some((lk, a, cand)) = improved else {
            break;
        };
        let rel = (sse - cand) / sse.max(f64::MIN_POSITIVE);
        lnk = lk;
        alpha = a;
        sse = cand;
        if rel < HERTZ_REL_TOL {
            break;
        }
    }
    Ok(HertzModel { k_e: lnk.exp(), alpha })
}

/// Options for [`fit_hybrid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridFitOptions {
    /// minimum joint-space distance between GP inputs [rad]
    pub min_dist: f64,
    pub gp: FitOptions,
}

impl Default for HybridFitOptions {
    fn default() -> Self {
        Self {
            min_dist: 0.015,
            gp: FitOptions::default(),
        }
    }
}

/// Fits the spring on all samples, then a GP on the residuals of a
/// distance-thinned subset.
pub fn fit_hybrid(
    samples: &[ContactSample],
    geom: &RobotGeometry,
    surf: &SurfaceGeometry,
    opts: &HybridFitOptions,
) -> Result<HybridModel> {
    let hook = fit_hook(samples)?;
    let qs: Vec<Vec<f64>> = samples.iter().map(|s| s.q.to_vec()).collect();
    let keep = gp::subsample_by_distance(&qs, opts.min_dist)?;
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| qs[i].clone()).collect();
    let resid: Vec<f64> = keep
        .iter()
        .map(|&i| {
            let s = &samples[i];
            s.force - force_hook(&hook, penetration_depth(&forward_kinematics(&s.q, geom), surf))
        })
        .collect();
    let data = Dataset::from_rows(&rows, &resid, 0.0)?;
    let fit = gp::fit_hyperparams_with(&data, &opts.gp)?;
    let gp = gp::build_posterior(&data, &fit.kernel, fit.noise_var)?;
    Ok(HybridModel { hook, gp })
}

/// `√(mean (pred − obs)²)`.
pub fn rmse_values(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != obs.len() {
        return Err(Error::InvalidArgument("rmse needs equally long, nonempty inputs".into()));
    }
    let sse: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Root-mean-square error of the model mean on `samples`.
pub fn rmse(model: &ForceModel, samples: &[ContactSample], geom: &RobotGeometry, surf: &SurfaceGeometry) -> Result<f64> {
    let pred = samples
        .iter()
        .map(|s| model.predict(&s.q, geom, surf).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let obs: Vec<f64> = samples.iter().map(|s| s.force).collect();
    rmse_values(&pred, &obs)
}

/// Serialisable form of a [`ForceModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelBundle {
    Hook(HookModel),
    Hertz(HertzModel),
    Hybrid { hook: HookModel, gp: GpBundle },
}

impl From<&ForceModel> for ModelBundle {
    fn from(m: &ForceModel) -> Self {
        match m {
            ForceModel::Hook(h) => ModelBundle::Hook(*h),
            ForceModel::Hertz(h) => ModelBundle::Hertz(*h),
            ForceModel::Hybrid(h) => ModelBundle::Hybrid {
                hook: h.hook,
                gp: h.gp.to_bundle(),
            },
        }
    }
}

impl ModelBundle {
    pub fn into_model(self) -> Result<ForceModel> {
        Ok(match self {
            ModelBundle::Hook(h) => ForceModel::Hook(h),
            ModelBundle::Hertz(h) => ForceModel::Hertz(h),
            ModelBundle::Hybrid { hook, gp } => ForceModel::Hybrid(HybridModel {
                hook,
                gp: GpPosterior::from_bundle(&gp)?,
            }),
        })
    }
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::gp::KernelConfig;
    use nalgebra::{DMatrix, DVector};
    use num_dual::{Dual64, DualNum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn at_x(x: f64) -> Pose {
        Pose { p: [x, 0.2, 0.7] }
    }

    #[test]
    fn penetration_examples() {
        let s = SurfaceGeometry::default();
        assert!((penetration_depth(&at_x(-0.50), &s) - 0.01).abs() < 1e-15);
        assert_eq!(penetration_depth(&at_x(-0.48), &s), 0.0);
        assert_eq!(penetration_depth(&at_x(-0.49), &s), 0.0);
        let flipped = SurfaceGeometry { normal: [0.0, 0.0, 1.0], p0: 0.5 };
        assert!((penetration_depth(&Pose { p: [0.0, 0.0, 0.53] }, &flipped) - 0.03).abs() < 1e-15);
        assert!(SurfaceGeometry { normal: [1.0, 1.0, 0.0], p0: 0.0 }.validate().is_err());
    }

    #[test]
    fn spring_examples() {
        let hook = HookModel { k_e: 341.56 };
        assert_eq!(force_hook(&hook, 0.0), 0.0);
        assert!((force_hook(&hook, 0.01) - 3.4156).abs() < 1e-12);
        assert_eq!(force_hook(&hook, 0.02), 2.0 * force_hook(&hook, 0.01));
        let hz = HertzModel { k_e: 2.5276e8, alpha: 3.7651 };
        // 2.5276e8 · 0.005^3.7651 evaluated with mpmath at 50 digits
        assert!((force_hertz(&hz, 0.005) - 0.548_403_616_366_347_6).abs() < 1e-12, "{}", force_hertz(&hz, 0.005));
        assert_eq!(force_hertz(&hz, 0.0), 0.0);
        let lin = HertzModel { k_e: 341.56, alpha: 1.0 };
        for d in [1e-4, 0.003, 0.02] {
            assert!((force_hertz(&lin, d) - force_hook(&hook, d)).abs() < 1e-12);
        }
    }

    fn samples_on(f: impl Fn(f64) -> f64, deltas: &[f64]) -> Vec<ContactSample> {
        deltas
            .iter()
            .map(|&d| ContactSample { q: [0.0; 3], delta: d, force: f(d) })
            .collect()
    }

    #[test]
    fn hook_fit() {
        let s = samples_on(|d| 300.0 * d, &[0.004, 0.011]);
        assert!((fit_hook(&s).unwrap().k_e - 300.0).abs() < 1e-10);
        assert!(fit_hook(&samples_on(|_| 1.0, &[0.0, 0.0])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.0388).unwrap();
        let noisy: Vec<ContactSample> = (0..500)
            .map(|_| {
                let d = rng.random_range(0.0..0.015);
                ContactSample { q: [0.0; 3], delta: d, force: 341.56 * d + noise.sample(&mut rng) }
            })
            .collect();
        let k = fit_hook(&noisy).unwrap().k_e;
        assert!((k / 341.56 - 1.0).abs() < 0.02);
        let sse = |k: f64| noisy.iter().map(|s| (k * s.delta - s.force).powi(2)).sum::<f64>();
        assert!(sse(k * 1.01) > sse(k) && sse(k * 0.99) > sse(k));
    }

    #[test]
    fn hertz_fit() {
        let grid: Vec<f64> = (1..=30).map(|i| i as f64 * 5e-4).collect();
        let exact = samples_on(|d| 1000.0 * d.powf(1.5), &grid);
        let m = fit_hertz(&exact, None).unwrap();
        assert!((m.k_e / 1000.0 - 1.0).abs() < 1e-6 && (m.alpha - 1.5).abs() < 1e-6, "{m:?}");

        let lin = samples_on(|d| 250.0 * d + 0.3 * d.sin(), &grid);
        let locked = fit_hertz(&lin, Some(1.0)).unwrap();
        assert!((locked.k_e - fit_hook(&lin).unwrap().k_e).abs() < 1e-8 * locked.k_e);
        assert_eq!(locked.alpha, 1.0);

        let make = |n: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.0388).unwrap();
            (0..n)
                .map(|_| {
                    let d: f64 = rng.random_range(0.002..0.02);
                    ContactSample { q: [0.0; 3], delta: d, force: 1000.0 * d.powf(1.5) + noise.sample(&mut rng) }
                })
                .collect::<Vec<_>>()
        };
        let err = |m: HertzModel| (m.k_e.ln() - 1000f64.ln()).abs() + (m.alpha - 1.5).abs();
        let small = fit_hertz(&make(50, 3), None).unwrap();
        let large = fit_hertz(&make(5000, 3), None).unwrap();
        assert!(err(large) < err(small), "{small:?} {large:?}");

        assert!(fit_hertz(&samples_on(|_| 0.0, &[0.01, 0.02]), None).is_err());
    }

    #[test]
    fn hertz_refinement_never_worse_than_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<ContactSample> = (0..200)
            .map(|_| {
                let d: f64 = rng.random_range(0.0..0.02);
                ContactSample { q: [0.0; 3], delta: d, force: (300.0 * d + 4e4 * d * d - 0.05).max(0.0) }
            })
            .collect();
        let logs: Vec<(f64, f64)> =
            s.iter().filter(|v| v.delta > 0.0 && v.force > 0.0).map(|v| (v.delta.ln(), v.force.ln())).collect();
        let n = logs.len() as f64;
        let mx = logs.iter().map(|v| v.0).sum::<f64>() / n;
        let my = logs.iter().map(|v| v.1).sum::<f64>() / n;
        let a = logs.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum::<f64>() / logs.iter().map(|v| (v.0 - mx).powi(2)).sum::<f64>();
        let seed_sse = hertz_sse(&s, (my - a * mx).exp(), a);
        let m = fit_hertz(&s, None).unwrap();
        assert!(hertz_sse(&s, m.k_e, m.alpha) <= seed_sse);
    }

    fn toy_hybrid(y: &[f64], noise: f64) -> (HybridModel, Vec<[f64; 3]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let qs: Vec<[f64; 3]> = (0..y.len())
            .map(|_| [rng.random_range(1.4..1.7), rng.random_range(0.6..0.9), rng.random_range(-1.6..-1.4)])
            .collect();
        let rows: Vec<Vec<f64>> = qs.iter().map(|q| q.to_vec()).collect();
        let data = Dataset::from_rows(&rows, y, 0.0).unwrap();
        let gp = gp::build_posterior(&data, &KernelConfig::new(0.5, vec![0.1, 0.1, 0.1]), noise).unwrap();
        (HybridModel { hook: HookModel { k_e: 341.56 }, gp }, qs)
    }

    #[test]
    fn hybrid_reduces_to_hook_on_zero_residuals() {
        let geom = RobotGeometry::default();
        let surf = SurfaceGeometry::default();
        let (m, qs) = toy_hybrid(&[0.0; 12], 0.01);
        for q in &qs {
            let (mean, _) = force_hybrid(&m, q, &geom, &surf).unwrap();
            let hook = force_hook(&m.hook, penetration_depth(&forward_kinematics(q, &geom), &surf));
            assert!((mean - hook).abs() < 1e-12);
        }
    }

    #[test]
    fn hybrid_matches_dense_oracle() {
        let geom = RobotGeometry::default();
        let surf = SurfaceGeometry::default();
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let (m, qs) = toy_hybrid(&y, 0.0);
        for (q, yi) in qs.iter().zip(&y) {
            let (mean, _) = force_hybrid(&m, q, &geom, &surf).unwrap();
            let hook = force_hook(&m.hook, penetration_depth(&forward_kinematics(q, &geom), &surf));
            assert!((mean - hook - yi).abs() < 1e-8);
        }
        // dense inverse, independent of the cached factor
        let n = qs.len();
        let x = DMatrix::from_fn(n, 3, |i, j| qs[i][j]);
        let mut k = gp::kernel_matrix(&m.gp.kernel, &x);
        for i in 0..n {
            k[(i, i)] += m.gp.jitter;
        }
        let kinv = k.try_inverse().unwrap();
        let yv = DVector::from_column_slice(&y);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let q = [rng.random_range(1.4..1.7), rng.random_range(0.6..0.9), rng.random_range(-1.6..-1.4)];
            let ks = DVector::from_fn(n, |i, _| gp::kernel_eval(&m.gp.kernel, &q, &qs[i]));
            let mean_o = (ks.transpose() * &kinv * &yv)[0]
                + force_hook(&m.hook, penetration_depth(&forward_kinematics(&q, &geom), &surf));
            let var_o = m.gp.kernel.signal_var - (ks.transpose() * &kinv * &ks)[0];
            let (mean, std) = force_hybrid(&m, &q, &geom, &surf).unwrap();
            assert!((mean - mean_o).abs() < 1e-9, "{mean} {mean_o}");
            assert!((std - var_o.max(0.0).sqrt()).abs() < 1e-6);
            assert_eq!(std, m.gp.predict(&q).unwrap().var.sqrt());
        }
    }

    #[test]
    fn smooth_mean_agrees_in_contact_and_is_differentiable() {
        let geom = RobotGeometry::default();
        let surf = SurfaceGeometry::default();
        let y: Vec<f64> = (0..12).map(|i| 0.2 * (i as f64).cos()).collect();
        let (hy, _) = toy_hybrid(&y, 0.01);
        let models = [
            ForceModel::Hook(HookModel { k_e: 341.56 }),
            ForceModel::Hertz(HertzModel { k_e: 2.5276e8, alpha: 3.7651 }),
            ForceModel::Hybrid(hy),
        ];
        let q_in = [1.5708, 0.7470, -1.4940];
        for m in &models {
            let p = forward_kinematics(&q_in, &geom);
            assert!(penetration_depth(&p, &surf) > 0.0);
            let smooth: f64 = m.smooth_mean(&q_in, &geom, &surf);
            assert!((smooth - m.predict(&q_in, &geom, &surf).unwrap().0).abs() < 1e-12);
            // derivative with respect to q3 against central differences
            let qd = [Dual64::from(q_in[0]), Dual64::from(q_in[1]), Dual64::from(q_in[2]).derivative()];
            let d = m.smooth_mean(&qd, &geom, &surf).eps;
            let h = 1e-7;
            let fd = (m.smooth_mean(&[q_in[0], q_in[1], q_in[2] + h], &geom, &surf)
                - m.smooth_mean(&[q_in[0], q_in[1], q_in[2] - h], &geom, &surf))
                / (2.0 * h);
            assert!((d - fd).abs() < 1e-5 * fd.abs().max(1.0), "{} {d} {fd}", m.name());
        }
        assert_eq!(odd_power(Dual64::from(0.0).derivative(), 2.0).eps, 0.0);
        assert_eq!(odd_power(Dual64::from(-0.5), 3.0).re(), -0.125);
    }

    #[test]
    fn rmse_oracles() {
        assert_eq!(rmse_values(&[2.0, 2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse_values(&[5.0; 7], &[6.0; 7]).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let o: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..3.0)).collect();
        // two passes: differences first, then squares accumulated in reverse
        let diffs: Vec<f64> = p.iter().zip(&o).map(|(a, b)| a - b).collect();
        let mut acc = 0.0;
        for d in diffs.iter().rev() {
            acc += d * d;
        }
        let oracle = (acc / 1000.0).sqrt();
        assert!((rmse_values(&p, &o).unwrap() - oracle).abs() < 1e-12);
        assert!(rmse_values(&[], &[]).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let (hy, qs) = toy_hybrid(&[0.1; 12], 0.01);
        let model = ForceModel::Hybrid(hy);
        let json = serde_json::to_string(&ModelBundle::from(&model)).unwrap();
        let back = serde_json::from_str::<ModelBundle>(&json).unwrap().into_model().unwrap();
        assert_eq!(back, model);
        let geom = RobotGeometry::default();
        let surf = SurfaceGeometry::default();
        assert_eq!(back.predict(&qs[0], &geom, &surf).unwrap(), model.predict(&qs[0], &geom, &surf).unwrap());
        let hz = ForceModel::Hertz(HertzModel { k_e: 1.0, alpha: 2.0 });
        let s = serde_json::to_string(&ModelBundle::from(&hz)).unwrap();
        assert!(s.contains("\"kind\":\"hertz\""));
    }
}
