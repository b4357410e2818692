use nalgebra::{SMatrix, SVector};
use num_dual::jacobian;

use crate::contact::{ForceModel, SurfaceGeometry};
use crate::dynamics::{forward_kinematics_generic, jacobian as arm_jacobian, rk4_step, state_derivative_generic, RobotGeometry, Scalar};
use crate::error::{Error, Result};

/// Prediction model used by the transcription: a discrete arm step and the
/// controlled outputs `(p_y, p_z, F_n)` as functions of the joint angles.
pub trait OcpModel {
    /// Next arm state `(q, q̇)` after `dt` under constant torque `u`, and its
    /// Jacobian with respect to `(q, q̇, u)`.
    fn step(&self, x: &[f64; 6], u: &[f64; 3], dt: f64) -> Result<([f64; 6], SMatrix<f64, 6, 9>)>;

    /// Same as [`OcpModel::step`] without derivatives.
    fn step_value(&self, x: &[f64; 6], u: &[f64; 3], dt: f64) -> Result<[f64; 6]>;

    /// Outputs and their Jacobian with respect to `q`.
    fn outputs(&self, q: &[f64; 3]) -> ([f64; 3], SMatrix<f64, 3, 3>);

    /// Standard deviation of the force output.
    fn force_std(&self, q: &[f64; 3]) -> Result<f64>;

    /// Torque balancing a normal force `force` at rest, used for cold starts.
    fn static_torque(&self, _q: &[f64; 3], _force: f64) -> [f64; 3] {
        [0.0; 3]
    }
}

/// Arm dynamics with the contact force from a [`ForceModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub geom: RobotGeometry,
    pub surf: SurfaceGeometry,
    pub force: ForceModel,
}

impl RobotModel {
    pub fn new(geom: RobotGeometry, surf: SurfaceGeometry, force: ForceModel) -> Self {
        Self { geom, surf, force }
    }

    fn rhs<D: Scalar>(&self, s: &[D; 6], u: &[D; 3]) -> [D; 6] {
        let q = [s[0], s[1], s[2]];
        let f = self.force.smooth_mean(&q, &self.geom, &self.surf);
        let n = self.surf.normal;
        let fv = [f * n[0], f * n[1], f * n[2]];
        state_derivative_generic(&q, &[s[3], s[4], s[5]], u, &fv, &self.geom)
    }
}

fn finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("prediction model step"))
    }
}

impl OcpModel for RobotModel {
    fn step(&self, x: &[f64; 6], u: &[f64; 3], dt: f64) -> Result<([f64; 6], SMatrix<f64, 6, 9>)> {
        let w = SVector::<f64, 9>::from_fn(|i, _| if i < 6 { x[i] } else { u[i - 6] });
        let (val, jac) = jacobian(
            |w| {
                let s0 = [w[0], w[1], w[2], w[3], w[4], w[5]];
                let uu = [w[6], w[7], w[8]];
                let s1 = rk4_step(|s| self.rhs(s, &uu), &s0, dt);
                SVector::from_column_slice(&s1)
            },
            w,
        );
        let next = [val[0], val[1], val[2], val[3], val[4], val[5]];
        finite(&next)?;
        finite(jac.as_slice())?;
        Ok((next, jac))
    }

    fn step_value(&self, x: &[f64; 6], u: &[f64; 3], dt: f64) -> Result<[f64; 6]> {
        let next = rk4_step(|s| self.rhs(s, u), x, dt);
        finite(&next)?;
        Ok(next)
    }

    fn outputs(&self, q: &[f64; 3]) -> ([f64; 3], SMatrix<f64, 3, 3>) {
        let (val, jac) = jacobian(
            |q| {
                let qa = [q[0], q[1], q[2]];
                let p = forward_kinematics_generic(&qa, &self.geom);
                let f = self.force.smooth_mean(&qa, &self.geom, &self.surf);
                SVector::from([p[1], p[2], f])
            },
            SVector::<f64, 3>::from_column_slice(q),
        );
        ([val[0], val[1], val[2]], jac)
    }

    fn force_std(&self, q: &[f64; 3]) -> Result<f64> {
        self.force.std(q)
    }

    fn static_torque(&self, q: &[f64; 3], force: f64) -> [f64; 3] {
        let j = arm_jacobian(q, &self.geom);
        let n = self.surf.normal;
        let t = j.transpose() * nalgebra::Vector3::new(force * n[0], force * n[1], force * n[2]);
        [t[0], t[1], t[2]]
    }
}

/// Linear stand-in `x⁺ = A x + B u`, `y = C q + y0`, for solver tests.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: SMatrix<f64, 6, 6>,
    pub b: SMatrix<f64, 6, 3>,
    pub c: SMatrix<f64, 3, 3>,
    pub y0: [f64; 3],
    pub sigma: f64,
}

impl LinearModel {
    /// `ẋ = 0`: the state never moves.
    pub fn frozen() -> Self {
        Self {
            a: SMatrix::identity(),
            b: SMatrix::zeros(),
            c: SMatrix::identity(),
            y0: [0.0; 3],
            sigma: 0.0,
        }
    }

    /// Exact discretisation of three decoupled double integrators `q̈ = u`.
    pub fn double_integrator(dt: f64) -> Self {
        let mut a = SMatrix::<f64, 6, 6>::identity();
        let mut b = SMatrix::<f64, 6, 3>::zeros();
        for i in 0..3 {
            a[(i, i + 3)] = dt;
            b[(i, i)] = 0.5 * dt * dt;
            b[(i + 3, i)] = dt;
        }
        Self { a, b, c: SMatrix::identity(), y0: [0.0; 3], sigma: 0.0 }
    }
}

impl OcpModel for LinearModel {
    fn step(&self, x: &[f64; 6], u: &[f64; 3], dt: f64) -> Result<([f64; 6], SMatrix<f64, 6, 9>)> {
        let next = self.step_value(x, u, dt)?;
        let mut j = SMatrix::<f64, 6, 9>::zeros();
        j.fixed_view_mut::<6, 6>(0, 0).copy_from(&self.a);
        j.fixed_view_mut::<6, 3>(0, 6).copy_from(&self.b);
        Ok((next, j))
    }

    fn step_value(&self, x: &[f64; 6], u: &[f64; 3], _dt: f64) -> Result<[f64; 6]> {
        let n = self.a * SVector::<f64, 6>::from_column_slice(x) + self.b * SVector::<f64, 3>::from_column_slice(u);
        Ok([n[0], n[1], n[2], n[3], n[4], n[5]])
    }

    fn outputs(&self, q: &[f64; 3]) -> ([f64; 3], SMatrix<f64, 3, 3>) {
        let y = self.c * SVector::<f64, 3>::from_column_slice(q);
        ([y[0] + self.y0[0], y[1] + self.y0[1], y[2] + self.y0[2]], self.c)
    }

    fn force_std(&self, _q: &[f64; 3]) -> Result<f64> {
        Ok(self.sigma)
    }
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::contact::{HookModel, HybridModel};
    use crate::gp::{build_posterior, Dataset, KernelConfig};

    fn hybrid_model() -> RobotModel {
        let rows = vec![vec![1.57, 0.75, -1.49], vec![1.60, 0.70, -1.50], vec![1.50, 0.80, -1.45]];
        let gp = build_posterior(&Dataset::from_rows(&rows, &[0.3, -0.2, 0.1], 0.0).unwrap(), &KernelConfig::new(0.2, vec![0.2; 3]), 1e-3).unwrap();
        RobotModel::new(
            RobotGeometry::default(),
            SurfaceGeometry::default(),
            ForceModel::Hybrid(HybridModel { hook: HookModel { k_e: 341.56 }, gp }),
        )
    }

    #[test]
    fn step_jacobian_matches_finite_differences() {
        let m = hybrid_model();
        let x = [1.5708, 0.747, -1.494, 0.01, -0.2, 0.02];
        let u = [0.1, -0.3, 0.6];
        let (val, jac) = m.step(&x, &u, 0.01).unwrap();
        assert_eq!(val, m.step_value(&x, &u, 0.01).unwrap());
        let h = 1e-6;
        for c in 0..9 {
            let (mut xp, mut up, mut xm, mut um) = (x, u, x, u);
            if c < 6 {
                xp[c] += h;
                xm[c] -= h;
            } else {
                up[c - 6] += h;
                um[c - 6] -= h;
            }
            let fp = m.step_value(&xp, &up, 0.01).unwrap();
            let fm = m.step_value(&xm, &um, 0.01).unwrap();
            for r in 0..6 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((fd - jac[(r, c)]).abs() < 1e-6 * (1.0 + fd.abs()), "({r},{c}) {fd} {}", jac[(r, c)]);
            }
        }
    }

    #[test]
    fn output_jacobian_and_static_torque() {
        let m = hybrid_model();
        let q = [1.5708, 0.747, -1.494];
        let (y, j) = m.outputs(&q);
        let h = 1e-7;
        for c in 0..3 {
            let mut qp = q;
            qp[c] += h;
            let (yp, _) = m.outputs(&qp);
            for r in 0..3 {
                assert!(((yp[r] - y[r]) / h - j[(r, c)]).abs() < 1e-4 * (1.0 + j[(r, c)].abs()));
            }
        }
        // torque from Jᵀ(F n) at rest yields zero acceleration
        let u = m.static_torque(&q, y[2]);
        let next = m.step_value(&[q[0], q[1], q[2], 0.0, 0.0, 0.0], &u, 1e-3).unwrap();
        assert!(next[3..].iter().all(|v| v.abs() < 1e-9), "{next:?}");
    }

    #[test]
    fn linear_stub() {
        let m = LinearModel::double_integrator(0.1);
        let (x, j) = m.step(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], 0.1).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-15 && (x[1] - 0.01).abs() < 1e-15 && (x[4] - 0.2).abs() < 1e-15);
        assert_eq!(j[(0, 3)], 0.1);
        assert_eq!(LinearModel::frozen().step_value(&[1.0; 6], &[5.0; 3], 0.1).unwrap(), [1.0; 6]);
    }
}
