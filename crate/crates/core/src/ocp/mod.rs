//! Path-following optimal control problem: configuration, output
//! constraint tightening, transcription by multiple shooting, a
//! Gauss-Newton SQP solver and the receding-horizon controller.

mod controller;
mod model;
mod nlp;
pub mod qp;
mod sqp;

pub use controller::{Controller, StepDiagnostics, StepOutput};
pub use model::{LinearModel, OcpModel, RobotModel};
pub use nlp::{objective_and_gradient, transcribe, ForceBounds, Nlp, Relaxation, NX, NU};
pub use sqp::{solve_sqp, OcpSolution, WarmStart};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::par::{self, Exec};

/// Horizon, weights and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpConfig {
    /// shooting intervals
    pub horizon_steps: usize,
    /// interval length, equal to the controller sampling time [s]
    pub dt: f64,
    /// weights on `(e_y, e_z, e_F, θ)`
    pub q_weights: [f64; 4],
    /// weights on `(u1, u2, u3, v)`
    pub r_weights: [f64; 4],
    /// terminal weights on `(q, q̇, z1, z2)`
    pub terminal_weights: [f64; 8],
    pub max_sqp_iter: usize,
    /// bound on the primal step and shooting defects at termination
    pub kkt_tol: f64,
    /// ℓ1 penalty on force-constraint violation
    pub slack_weight: f64,
    /// relative shrink of the velocity boxes inside the optimiser
    pub velocity_margin: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 15,
            dt: 0.01,
            q_weights: [9e6, 9e6, 6.0, 1e2],
            r_weights: [6.0; 4],
            terminal_weights: [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1e2, 0.0],
            max_sqp_iter: 25,
            kkt_tol: 1e-4,
            slack_weight: 1e6,
            velocity_margin: 0.05,
        }
    }
}

impl OcpConfig {
    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |w: &[f64]| w.iter().all(|v| *v >= 0.0 && v.is_finite());
        if self.horizon_steps == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("horizon needs at least one interval and dt > 0".into()));
        }
        if !nonneg(&self.q_weights) || !nonneg(&self.terminal_weights) || !nonneg(&self.r_weights) {
            return Err(Error::Config("weights must be finite and nonnegative".into()));
        }
        if self.max_sqp_iter == 0 || !(self.kkt_tol > 0.0) || !(self.slack_weight > 0.0) {
            return Err(Error::Config("solver settings must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.velocity_margin) {
            return Err(Error::Config("velocity margin must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Copy with all weights multiplied by `c`.
    pub fn scaled_weights(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.q_weights.iter_mut().for_each(|w| *w *= c);
        out.r_weights.iter_mut().for_each(|w| *w *= c);
        out.terminal_weights.iter_mut().for_each(|w| *w *= c);
        out
    }
}

/// Boxes on states, inputs, virtual states and the force output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSet {
    /// joint angle bounds [rad]
    pub q_lo: [f64; 3],
    pub q_hi: [f64; 3],
    /// joint velocity bounds [rad/s]
    pub qd_lo: [f64; 3],
    pub qd_hi: [f64; 3],
    /// torque bounds [N·m]
    pub u_lo: [f64; 3],
    pub u_hi: [f64; 3],
    /// bounds on `(θ, θ̇)`
    pub z_lo: [f64; 2],
    pub z_hi: [f64; 2],
    pub v_lo: f64,
    pub v_hi: f64,
    /// normal force bounds [N]
    pub force_lo: f64,
    pub force_hi: f64,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            q_lo: [-170.0 * deg, -120.0 * deg, -120.0 * deg],
            q_hi: [170.0 * deg, 120.0 * deg, 120.0 * deg],
            qd_lo: [-0.04, -1.0, -0.05],
            qd_hi: [0.04, 1.0, 0.03],
            u_lo: [-13.0, -5.0, -5.0],
            u_hi: [10.0, 5.0, 5.0],
            z_lo: [-1.0, 0.0],
            z_hi: [0.0, 1.0],
            v_lo: -10.0,
            v_hi: 0.5,
            force_lo: 0.0,
            force_hi: 6.0,
        }
    }
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<()> {
        let ok = (0..3).all(|i| self.q_lo[i] <= self.q_hi[i] && self.qd_lo[i] <= self.qd_hi[i] && self.u_lo[i] <= self.u_hi[i])
            && (0..2).all(|i| self.z_lo[i] <= self.z_hi[i])
            && self.v_lo <= self.v_hi
            && self.force_lo <= self.force_hi;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("constraint boxes must be nonempty".into()))
        }
    }

    /// `(lo, hi)` on the stacked state `(q, q̇, z1, z2)`.
    pub fn state_box(&self) -> ([f64; 8], [f64; 8]) {
        let mut lo = [0.0; 8];
        let mut hi = [0.0; 8];
        lo[..3].copy_from_slice(&self.q_lo);
        lo[3..6].copy_from_slice(&self.qd_lo);
        lo[6..].copy_from_slice(&self.z_lo);
        hi[..3].copy_from_slice(&self.q_hi);
        hi[3..6].copy_from_slice(&self.qd_hi);
        hi[6..].copy_from_slice(&self.z_hi);
        (lo, hi)
    }

    /// `(lo, hi)` on the stacked input `(u, v)`.
    pub fn input_box(&self) -> ([f64; 4], [f64; 4]) {
        (
            [self.u_lo[0], self.u_lo[1], self.u_lo[2], self.v_lo],
            [self.u_hi[0], self.u_hi[1], self.u_hi[2], self.v_hi],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TighteningMode {
    #[default]
    None,
    /// back-off `c·σ_y(x)` at each predicted node
    Pointwise,
    /// constant back-off `c·σ_max` over a state region
    WorstCase,
    /// constant user-given back-off
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TighteningPolicy {
    pub mode: TighteningMode,
    /// confidence multiplier on σ
    pub confidence: f64,
    /// back-off for [`TighteningMode::Fixed`] [N]
    pub backoff: f64,
    /// region for σ_max: training-input bounding box inflated by this many lengthscales
    pub region_inflation: f64,
    /// grid points per input dimension for σ_max
    pub region_points: usize,
}

impl Default for TighteningPolicy {
    fn default() -> Self {
        Self {
            mode: TighteningMode::None,
            confidence: 2.0,
            backoff: 0.0,
            region_inflation: 1.0,
            region_points: 9,
        }
    }
}

impl TighteningPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence >= 0.0) || !(self.backoff >= 0.0) || !(self.region_inflation >= 0.0) || self.region_points < 2 {
            return Err(Error::Config("tightening parameters must be nonnegative (and >= 2 grid points)".into()));
        }
        Ok(())
    }
}

/// `[lo + backoff, hi − backoff]`.
pub fn tighten_output_box(lo: f64, hi: f64, backoff: f64) -> Result<(f64, f64)> {
    if !(backoff >= 0.0) {
        return Err(Error::InvalidArgument(format!("back-off must be nonnegative, got {backoff}")));
    }
    let (a, b) = (lo + backoff, hi - backoff);
    if a > b {
        return Err(Error::EmptyTightenedSet { lo, hi, backoff });
    }
    Ok((a, b))
}

/// Largest posterior standard deviation over `grid`.
pub fn sigma_max_over_region(gp: &GpPosterior, grid: &[Vec<f64>], exec: Exec) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("σ_max needs a nonempty grid".into()));
    }
    let stds = par::map(exec, grid, |x| gp.predict(x).map(|p| p.std()));
    stds.into_iter().try_fold(0.0f64, |best, s| Ok(best.max(s?)))
}

/// Regular grid over the bounding box of the GP inputs, inflated by
/// `inflation` lengthscales per dimension.
pub fn default_sigma_region(gp: &GpPosterior, inflation: f64, points: usize) -> Vec<Vec<f64>> {
    let d = gp.dim();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let col = gp.x.column(j);
            let pad = inflation * gp.kernel.lengthscales[j];
            let (lo, hi) = (col.min() - pad, col.max() + pad);
            (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
        })
        .collect();
    let total = points.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            (0..d)
                .map(|j| {
                    let v = axes[j][idx % points];
                    idx /= points;
                    v
                })
                .collect()
        })
        .collect()
}

/// `(e, θ)ᵀQ(e, θ) + (u, v)ᵀR(u, v)` with diagonal weights.
pub fn stage_cost(cfg: &OcpConfig, e_pf: &[f64; 3], theta: f64, u: &[f64; 3], v: f64) -> f64 {
    let y = [e_pf[0], e_pf[1], e_pf[2], theta];
    let c = [u[0], u[1], u[2], v];
    (0..4).map(|i| cfg.q_weights[i] * y[i] * y[i] + cfg.r_weights[i] * c[i] * c[i]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{build_posterior, Dataset, KernelConfig};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backoff_arithmetic() {
        assert_eq!(tighten_output_box(0.0, 6.0, 0.7).unwrap(), (0.7, 5.3));
        assert_eq!(tighten_output_box(0.0, 6.0, 0.0).unwrap(), (0.0, 6.0));
        assert!(matches!(tighten_output_box(0.0, 6.0, 3.1), Err(Error::EmptyTightenedSet { .. })));
        assert!(tighten_output_box(0.0, 6.0, -0.1).is_err());
        let (a1, b1) = tighten_output_box(0.0, 6.0, 0.4).unwrap();
        let (a2, b2) = tighten_output_box(0.0, 6.0, 1.2).unwrap();
        assert!(a2 >= a1 && b2 <= b1);
    }

    fn small_gp(noise: f64) -> GpPosterior {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0].sin()).collect();
        build_posterior(&Dataset::from_rows(&rows, &y, 0.0).unwrap(), &KernelConfig::new(0.8, vec![0.5; 3]), noise).unwrap()
    }

    #[test]
    fn sigma_max_cases() {
        // one training point at the origin and a grid on a sphere around it:
        // every grid point has the same variance
        let gp = build_posterior(
            &Dataset::new(DMatrix::zeros(1, 3), DVector::from_element(1, 0.3), 0.0).unwrap(),
            &KernelConfig::new(1.0, vec![1.0; 3]),
            0.1,
        )
        .unwrap();
        let sphere: Vec<Vec<f64>> = (0..8).map(|i| {
            let a = i as f64 * 0.7;
            vec![a.cos(), a.sin(), 0.0]
        }).collect();
        let s = sigma_max_over_region(&gp, &sphere, Exec::Sequential).unwrap();
        let k = (-0.5f64).exp();
        assert!((s - (1.0 - k * k / 1.1).sqrt()).abs() < 1e-9);

        let gp = small_gp(0.0);
        let train: Vec<Vec<f64>> = (0..gp.len()).map(|i| gp.x.row(i).iter().copied().collect()).collect();
        assert!(sigma_max_over_region(&gp, &train, Exec::Sequential).unwrap() <= gp.jitter.sqrt() + 1e-9);

        let grid = default_sigma_region(&gp, 1.0, 5);
        assert_eq!(grid.len(), 125);
        let scan = grid.iter().map(|x| gp.predict(x).unwrap().var.sqrt()).fold(0.0, f64::max);
        assert_eq!(sigma_max_over_region(&gp, &grid, Exec::Sequential).unwrap(), scan);
        assert_eq!(sigma_max_over_region(&gp, &grid, Exec::Parallel).unwrap(), scan);
        assert!(sigma_max_over_region(&gp, &[], Exec::Sequential).is_err());
    }

    #[test]
    fn stage_cost_examples() {
        let cfg = OcpConfig::default();
        assert_eq!(stage_cost(&cfg, &[0.0; 3], 0.0, &[0.0; 3], 0.0), 0.0);
        assert!((stage_cost(&cfg, &[1e-3, 0.0, 0.0], 0.0, &[0.0; 3], 0.0) - 9.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = cfg.q_weights.iter().chain(&cfg.r_weights).copied().collect();
            let m = DMatrix::from_diagonal(&DVector::from_vec(w));
            let x = DVector::from_vec(v.clone());
            let oracle = (x.transpose() * m * &x)[0];
            let c = stage_cost(&cfg, &[v[0], v[1], v[2]], v[3], &[v[4], v[5], v[6]], v[7]);
            assert!((c - oracle).abs() < 1e-6 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn defaults_are_consistent() {
        let cfg = OcpConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.horizon() - 0.15).abs() < 1e-15);
        ConstraintSet::default().validate().unwrap();
        TighteningPolicy::default().validate().unwrap();
    }
}
