//! Reference path `θ ↦ (p_y, p_z, F_n)` on `θ ∈ [−1, 0]`, the virtual
//! double integrator driving `θ`, and the path-following error.

use num_dual::Dual64;
use serde::{Deserialize, Serialize};

use crate::dynamics::Scalar;
use crate::error::{Error, Result};

pub const THETA_MIN: f64 = -1.0;
pub const THETA_MAX: f64 = 0.0;

/// Writing curve in the y–z plane with a force profile along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinusoidPath {
    pub y_start: f64,
    pub y_span: f64,
    pub z_center: f64,
    pub z_amplitude: f64,
    pub z_cycles: f64,
    pub force_mean: f64,
    pub force_amplitude: f64,
    pub force_cycles: f64,
}

impl Default for SinusoidPath {
    fn default() -> Self {
        Self {
            y_start: 0.15,
            y_span: 0.10,
            z_center: 0.68,
            z_amplitude: 0.02,
            z_cycles: 2.0,
            force_mean: 3.0,
            force_amplitude: 1.5,
            force_cycles: 1.0,
        }
    }
}

/// Knot table interpolated by cubic Hermite segments with centred
/// finite-difference slopes (one-sided at the ends), so the curve is C¹.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TablePath {
    pub theta: Vec<f64>,
    pub py: Vec<f64>,
    pub pz: Vec<f64>,
    pub force: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PathDefinition {
    Sinusoid(SinusoidPath),
    Table(TablePath),
}

impl Default for PathDefinition {
    fn default() -> Self {
        PathDefinition::Sinusoid(SinusoidPath::default())
    }
}

impl TablePath {
    fn slopes(&self, vals: &[f64]) -> Vec<f64> {
        let t = &self.theta;
        let n = t.len();
        (0..n)
            .map(|i| {
                let (a, b) = match i {
                    0 => (0, 1),
                    _ if i == n - 1 => (n - 2, n - 1),
                    _ => (i - 1, i + 1),
                };
                (vals[b] - vals[a]) / (t[b] - t[a])
            })
            .collect()
    }

    fn eval<D: Scalar>(&self, theta: D) -> [D; 3] {
        let t = &self.theta;
        let r = theta.re();
        let seg = t.partition_point(|v| *v <= r).clamp(1, t.len() - 1) - 1;
        let h = t[seg + 1] - t[seg];
        let s = (theta - t[seg]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = s3 * 2.0 - s2 * 3.0 + 1.0;
        let h10 = s3 - s2 * 2.0 + s;
        let h01 = s2 * 3.0 - s3 * 2.0;
        let h11 = s3 - s2;
        let mut out = [D::zero(); 3];
        for (o, vals) in out.iter_mut().zip([&self.py, &self.pz, &self.force]) {
            let m = self.slopes(vals);
            *o = h00 * vals[seg] + h10 * (h * m[seg]) + h01 * vals[seg + 1] + h11 * (h * m[seg + 1]);
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let n = self.theta.len();
        if n < 2 || self.py.len() != n || self.pz.len() != n || self.force.len() != n {
            return Err(Error::Config("path table needs >= 2 knots and equally long columns".into()));
        }
        if self.theta.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("path table theta must be strictly increasing".into()));
        }
        if self.theta[0] > THETA_MIN || self.theta[n - 1] < THETA_MAX {
            return Err(Error::Config("path table must cover theta in [-1, 0]".into()));
        }
        Ok(())
    }
}

impl PathDefinition {
    /// Reference for generic scalars; no clamping.
    pub fn eval_generic<D: Scalar>(&self, theta: D) -> [D; 3] {
        match self {
            PathDefinition::Sinusoid(p) => {
                let s = theta + 1.0;
                let tau = std::f64::consts::TAU;
                [
                    s * p.y_span + p.y_start,
                    (s * (tau * p.z_cycles)).sin() * p.z_amplitude + p.z_center,
                    (s * (tau * p.force_cycles)).sin() * p.force_amplitude + p.force_mean,
                ]
            }
            PathDefinition::Table(t) => t.eval(theta),
        }
    }

    /// `dr/dθ` at `theta`.
    pub fn derivative(&self, theta: f64) -> [f64; 3] {
        let r = self.eval_generic(Dual64::from(theta).derivative());
        [r[0].eps, r[1].eps, r[2].eps]
    }

    /// Checks the table shape and that the force reference stays strictly
    /// inside `force_box` on a dense grid.
    pub fn validate(&self, force_box: (f64, f64)) -> Result<()> {
        if let PathDefinition::Table(t) = self {
            t.validate()?;
        }
        for i in 0..=1000 {
            let theta = THETA_MIN + (THETA_MAX - THETA_MIN) * i as f64 / 1000.0;
            let r = self.eval_generic(theta);
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("path is not finite at theta = {theta}")));
            }
            if !(r[2] > force_box.0 && r[2] < force_box.1) {
                return Err(Error::Config(format!(
                    "force reference {} at theta = {theta} is not strictly inside [{}, {}]",
                    r[2], force_box.0, force_box.1
                )));
            }
        }
        Ok(())
    }
}

/// Reference at `theta`, clamped to `[−1, 0]`. Overshoots beyond round-off
/// are logged.
pub fn eval_path(path: &PathDefinition, theta: f64) -> [f64; 3] {
    let clamped = theta.clamp(THETA_MIN, THETA_MAX);
    if (clamped - theta).abs() > 1e-9 {
        log::warn!("path parameter {theta} clamped to {clamped}");
    }
    path.eval_generic(clamped)
}

/// Virtual timing state `(θ, θ̇)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VirtualState {
    pub z1: f64,
    pub z2: f64,
}

impl VirtualState {
    pub fn start() -> Self {
        Self { z1: THETA_MIN, z2: 0.0 }
    }
}

pub fn virtual_dynamics(z: &VirtualState, v: f64) -> [f64; 2] {
    [z.z2, v]
}

/// Exact one-step update of the double integrator under constant `v`.
pub fn virtual_step(z: &VirtualState, v: f64, dt: f64) -> VirtualState {
    VirtualState {
        z1: z.z1 + z.z2 * dt + 0.5 * v * dt * dt,
        z2: z.z2 + v * dt,
    }
}

/// `r(θ) − y_model`.
pub fn path_error(y_model: &[f64; 3], z: &VirtualState, path: &PathDefinition) -> [f64; 3] {
    let r = eval_path(path, z.z1);
    [r[0] - y_model[0], r[1] - y_model[1], r[2] - y_model[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rk4_step;

    #[test]
    fn default_endpoints() {
        let p = PathDefinition::default();
        let a = eval_path(&p, -1.0);
        assert_eq!(a, [0.15, 0.68, 3.0]);
        let b = eval_path(&p, 0.0);
        // sin(4π) and sin(2π) are O(1e-16) in floating point
        assert!((b[0] - 0.25).abs() < 1e-15 && (b[1] - 0.68).abs() < 1e-15 && (b[2] - 3.0).abs() < 1e-14);
        assert_eq!(eval_path(&p, -1.5), a);
        p.validate((0.0, 6.0)).unwrap();
        assert!(p.validate((0.0, 4.0)).is_err());
    }

    fn check_smooth(p: &PathDefinition) {
        let h = 1e-6;
        let mut prev: Option<[f64; 3]> = None;
        for i in 0..=400 {
            let th = -1.0 + i as f64 / 400.0;
            let d = p.derivative(th);
            let lo = (th - h).max(-1.0);
            let hi = (th + h).min(0.0);
            let (a, b) = (p.eval_generic(lo), p.eval_generic(hi));
            for k in 0..3 {
                let fd = (b[k] - a[k]) / (hi - lo);
                assert!((fd - d[k]).abs() < 1e-4 * (1.0 + d[k].abs()), "theta {th} comp {k}: {fd} vs {}", d[k]);
                if let Some(pv) = prev {
                    assert!((pv[k] - d[k]).abs() < 0.5 * (1.0 + d[k].abs()), "jump at {th}");
                }
            }
            prev = Some(d);
        }
    }

    #[test]
    fn sinusoid_is_smooth() {
        check_smooth(&PathDefinition::default());
    }

    fn table() -> PathDefinition {
        PathDefinition::Table(TablePath {
            theta: vec![-1.0, -0.7, -0.4, -0.2, 0.0],
            py: vec![0.15, 0.18, 0.20, 0.23, 0.25],
            pz: vec![0.68, 0.69, 0.67, 0.68, 0.68],
            force: vec![2.0, 3.5, 4.0, 3.0, 2.5],
        })
    }

    #[test]
    fn table_interpolates_knots_and_is_c1() {
        let p = table();
        p.validate((0.0, 6.0)).unwrap();
        let PathDefinition::Table(t) = &p else { unreachable!() };
        for i in 0..t.theta.len() {
            let r = p.eval_generic(t.theta[i]);
            assert!((r[0] - t.py[i]).abs() < 1e-14 && (r[2] - t.force[i]).abs() < 1e-14);
        }
        check_smooth(&p);
        // a straight-line table is reproduced exactly
        let line = PathDefinition::Table(TablePath {
            theta: vec![-1.0, -0.5, 0.0],
            py: vec![0.0, 0.5, 1.0],
            pz: vec![1.0; 3],
            force: vec![3.0; 3],
        });
        assert!((line.eval_generic(-0.3)[0] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn bad_tables_rejected() {
        let mut t = TablePath { theta: vec![-1.0, 0.0], py: vec![0.0; 2], pz: vec![0.0; 2], force: vec![3.0; 2] };
        assert!(PathDefinition::Table(t.clone()).validate((0.0, 6.0)).is_ok());
        t.theta = vec![-0.9, 0.0];
        assert!(PathDefinition::Table(t.clone()).validate((0.0, 6.0)).is_err());
        t.theta = vec![0.0, -1.0];
        assert!(PathDefinition::Table(t).validate((0.0, 6.0)).is_err());
    }

    #[test]
    fn virtual_system() {
        assert_eq!(virtual_dynamics(&VirtualState { z1: -1.0, z2: 0.0 }, 0.0), [0.0, 0.0]);
        assert_eq!(virtual_dynamics(&VirtualState { z1: -0.5, z2: 0.2 }, 0.1), [0.2, 0.1]);
        let (z0, v, dt) = (VirtualState { z1: -1.0, z2: 0.3 }, 0.7, 0.01);
        let mut s = [z0.z1, z0.z2];
        for _ in 0..100 {
            s = rk4_step(|x: &[f64; 2]| [x[1], v], &s, dt);
        }
        let t: f64 = 1.0;
        let closed = z0.z1 + z0.z2 * t + 0.5 * v * t * t;
        assert!((s[0] - closed).abs() < 1e-12);
        let exact = (0..100).fold(z0, |z, _| virtual_step(&z, v, dt));
        assert!((exact.z1 - closed).abs() < 1e-12);
    }

    #[test]
    fn error_sign() {
        let p = PathDefinition::default();
        let z = VirtualState { z1: -0.6, z2: 0.0 };
        let r = eval_path(&p, -0.6);
        assert_eq!(path_error(&r, &z, &p), [0.0; 3]);
        let e = path_error(&[r[0] + 0.01, r[1], r[2]], &z, &p);
        assert!((e[0] + 0.01).abs() < 1e-15 && e[1] == 0.0 && e[2] == 0.0);
    }
}
