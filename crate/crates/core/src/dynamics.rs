//! Rigid-body model of the three-joint writing arm.
//!
//! Joint 1 rotates about the vertical axis through the base point, joints 2
//! and 3 are pitch joints of a two-link arm in the vertical plane selected by
//! joint 1. A short horizontal offset link connects joint 1 and joint 2. At
//! `q = 0` all three links point along `+y`.
//!
//! The state equation is `q̈ = B(q)⁻¹ (u − J(q)ᵀ F)`: gravity, Coriolis and
//! friction terms are zero (gravity-compensated arm at low speed), `F` is the
//! force the tool exerts on the environment.
//!
//! Kinematics and dynamics are generic over [`Scalar`] so the same code runs
//! on `f64` and on forward-mode dual numbers for exact sensitivities.

use nalgebra::{Matrix3, Vector3, Vector6};
use num_dual::DualNum;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number type accepted by the generic model code.
pub trait Scalar: DualNum<f64> + Copy {}
impl<T: DualNum<f64> + Copy> Scalar for T {}

#[inline]
fn c<D: Scalar>(v: f64) -> D {
    D::from(v)
}

/// Joint angles and velocities, stacked as `x = (q, q̇)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: [f64; 3],
    pub qd: [f64; 3],
}

impl JointState {
    pub fn new(q: [f64; 3], qd: [f64; 3]) -> Self {
        Self { q, qd }
    }

    pub fn at_rest(q: [f64; 3]) -> Self {
        Self { q, qd: [0.0; 3] }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.q[0], self.q[1], self.q[2], self.qd[0], self.qd[1], self.qd[2])
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            q: [x[0], x[1], x[2]],
            qd: [x[3], x[4], x[5]],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.q[0], self.q[1], self.q[2], self.qd[0], self.qd[1], self.qd[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }
}

/// Joint actuation torques [N·m].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointTorque(pub [f64; 3]);

/// Cartesian tool position in the base frame [m].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub p: [f64; 3],
}

/// Link lengths, masses and inertias of the arm.
///
/// `link_inertia[i]` is the central moment of inertia of link `i` about any
/// axis perpendicular to it (slender-rod model); `joint_inertia[i]` is the
/// reflected rotor inertia added on the diagonal of `B(q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotGeometry {
    pub base: [f64; 3],
    pub lengths: [f64; 3],
    pub masses: [f64; 3],
    pub link_inertia: [f64; 3],
    pub joint_inertia: [f64; 3],
}

impl Default for RobotGeometry {
    fn default() -> Self {
        let lengths = [0.05, 0.30, 0.30];
        let masses = [2.0, 2.5, 1.5];
        Self {
            base: [0.0, 0.2, 0.68],
            lengths,
            masses,
            link_inertia: [
                masses[0] * lengths[0] * lengths[0] / 12.0,
                masses[1] * lengths[1] * lengths[1] / 12.0,
                masses[2] * lengths[2] * lengths[2] / 12.0,
            ],
            joint_inertia: [0.3, 0.2, 0.1],
        }
    }
}

impl RobotGeometry {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .base
            .iter()
            .chain(&self.lengths)
            .chain(&self.masses)
            .chain(&self.link_inertia)
            .chain(&self.joint_inertia);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("robot geometry"));
        }
        if self.lengths.iter().any(|&l| l <= 0.0) || self.masses.iter().any(|&m| m <= 0.0) {
            return Err(Error::InvalidArgument(
                "link lengths and masses must be strictly positive".into(),
            ));
        }
        if self.link_inertia.iter().any(|&i| i < 0.0) || self.joint_inertia.iter().any(|&i| i <= 0.0) {
            return Err(Error::InvalidArgument(
                "link inertias must be non-negative and joint inertias positive".into(),
            ));
        }
        Ok(())
    }

    /// Same geometry with every link length multiplied by `factor`.
    pub fn scaled_lengths(&self, factor: f64) -> Self {
        let mut g = self.clone();
        for l in &mut g.lengths {
            *l *= factor;
        }
        g
    }
}

/// Trigonometric terms shared by kinematics and inertia.
struct Frame<D> {
    /// horizontal arm direction `(-sin q1, cos q1, 0)`
    a: [D; 3],
    /// `∂a/∂q1`
    da: [D; 3],
    s2: D,
    c2: D,
    s23: D,
    c23: D,
}

impl<D: Scalar> Frame<D> {
    fn new(q: &[D; 3]) -> Self {
        let (s1, c1) = (q[0].sin(), q[0].cos());
        let q23 = q[1] + q[2];
        Frame {
            a: [-s1, c1, D::zero()],
            da: [-c1, -s1, D::zero()],
            s2: q[1].sin(),
            c2: q[1].cos(),
            s23: q23.sin(),
            c23: q23.cos(),
        }
    }
}

/// Tool position for generic scalars.
pub fn forward_kinematics_generic<D: Scalar>(q: &[D; 3], geom: &RobotGeometry) -> [D; 3] {
    let f = Frame::new(q);
    let [l1, l2, l3] = geom.lengths;
    let rho = f.c2 * l2 + f.c23 * l3 + l1;
    let h = f.s2 * l2 + f.s23 * l3;
    [
        f.a[0] * rho + geom.base[0],
        f.a[1] * rho + geom.base[1],
        h + geom.base[2],
    ]
}

/// Translational Jacobian `∂p/∂q` for generic scalars, row-major.
pub fn jacobian_generic<D: Scalar>(q: &[D; 3], geom: &RobotGeometry) -> [[D; 3]; 3] {
    let f = Frame::new(q);
    let [l1, l2, l3] = geom.lengths;
    let rho = f.c2 * l2 + f.c23 * l3 + l1;
    // radial and vertical rates of joints 2 and 3
    let r2 = -(f.s2 * l2 + f.s23 * l3);
    let h2 = f.c2 * l2 + f.c23 * l3;
    let r3 = -f.s23 * l3;
    let h3 = f.c23 * l3;
    let mut j = [[D::zero(); 3]; 3];
    for i in 0..2 {
        j[i][0] = f.da[i] * rho;
        j[i][1] = f.a[i] * r2;
        j[i][2] = f.a[i] * r3;
    }
    j[2][0] = D::zero();
    j[2][1] = h2;
    j[2][2] = h3;
    j
}

/// Joint-space inertia matrix `B(q)`.
///
/// The base rotation decouples from the two pitch joints, so `B` is
/// block-diagonal with a scalar block for joint 1.
pub fn inertia_generic<D: Scalar>(q: &[D; 3], geom: &RobotGeometry) -> [[D; 3]; 3] {
    let f = Frame::new(q);
    let [l1, l2, l3] = geom.lengths;
    let [m1, m2, m3] = geom.masses;
    let [i1, i2, i3] = geom.link_inertia;
    let [r1, r2, r3] = geom.joint_inertia;

    // horizontal distances of the link centres from the joint-1 axis
    let rho2 = f.c2 * (0.5 * l2) + l1;
    let rho3 = f.c2 * l2 + f.c23 * (0.5 * l3) + l1;
    let b11 = rho2 * rho2 * m2
        + rho3 * rho3 * m3
        + f.c2 * f.c2 * i2
        + f.c23 * f.c23 * i3
        + c::<D>(m1 * 0.25 * l1 * l1 + i1 + r1);

    // planar two-link block; link-3 centre velocity columns
    let lc3 = 0.5 * l3;
    let v2r = -(f.s2 * l2 + f.s23 * lc3);
    let v2h = f.c2 * l2 + f.c23 * lc3;
    let v3r = -f.s23 * lc3;
    let v3h = f.c23 * lc3;
    let b22 = (v2r * v2r + v2h * v2h) * m3 + c::<D>(m2 * 0.25 * l2 * l2 + i2 + i3 + r2);
    let b23 = (v2r * v3r + v2h * v3h) * m3 + c::<D>(i3);
    let b33 = c::<D>(m3 * lc3 * lc3 + i3 + r3);

    [
        [b11, D::zero(), D::zero()],
        [D::zero(), b22, b23],
        [D::zero(), b23, b33],
    ]
}

/// Solves the 3×3 system `m · x = rhs` by Cramer's rule.
pub fn solve3<D: Scalar>(m: &[[D; 3]; 3], rhs: &[D; 3]) -> [D; 3] {
    let det3 = |a: &[[D; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let inv_det = det3(m).recip();
    let mut out = [D::zero(); 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut mc = *m;
        for row in 0..3 {
            mc[row][col] = rhs[row];
        }
        *o = det3(&mc) * inv_det;
    }
    out
}

/// `(q̇, q̈)` for generic scalars; `force` is the contact force vector.
pub fn state_derivative_generic<D: Scalar>(
    q: &[D; 3],
    qd: &[D; 3],
    u: &[D; 3],
    force: &[D; 3],
    geom: &RobotGeometry,
) -> [D; 6] {
    let j = jacobian_generic(q, geom);
    let b = inertia_generic(q, geom);
    let mut rhs = *u;
    for (i, r) in rhs.iter_mut().enumerate() {
        for (k, fk) in force.iter().enumerate() {
            *r -= j[k][i] * *fk;
        }
    }
    let qdd = solve3(&b, &rhs);
    [qd[0], qd[1], qd[2], qdd[0], qdd[1], qdd[2]]
}

pub fn forward_kinematics(q: &[f64; 3], geom: &RobotGeometry) -> Pose {
    Pose {
        p: forward_kinematics_generic(q, geom),
    }
}

pub fn jacobian(q: &[f64; 3], geom: &RobotGeometry) -> Matrix3<f64> {
    let j = jacobian_generic(q, geom);
    Matrix3::from_fn(|r, c| j[r][c])
}

/// Joint angles placing the tool at `target`, by damped Newton steps from
/// `guess`. The guess selects the elbow branch.
pub fn inverse_kinematics(target: &[f64; 3], guess: &[f64; 3], geom: &RobotGeometry) -> Result<[f64; 3]> {
    let mut q = Vector3::from_column_slice(guess);
    let t = Vector3::from_column_slice(target);
    for _ in 0..100 {
        let qa = [q[0], q[1], q[2]];
        let e = t - Vector3::from(forward_kinematics(&qa, geom).p);
        if e.norm() < 1e-12 {
            return Ok(qa);
        }
        let j = jacobian(&qa, geom);
        let dq = (j.transpose() * j + Matrix3::identity() * 1e-12)
            .cholesky()
            .map(|c| c.solve(&(j.transpose() * e)))
            .ok_or_else(|| Error::InvalidArgument("singular arm Jacobian".into()))?;
        let scale = (0.2 / dq.amax()).min(1.0);
        q += dq * scale;
    }
    Err(Error::InvalidArgument(format!("target {target:?} is out of reach")))
}

pub fn inertia(q: &[f64; 3], geom: &RobotGeometry) -> Matrix3<f64> {
    let b = inertia_generic(q, geom);
    Matrix3::from_fn(|r, c| b[r][c])
}

/// State derivative of the arm; rejects non-finite inputs.
pub fn state_derivative(
    x: &JointState,
    u: &JointTorque,
    force: &[f64; 3],
    geom: &RobotGeometry,
) -> Result<Vector6<f64>> {
    if !x.is_finite() || u.0.iter().chain(force).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state derivative input"));
    }
    let d = state_derivative_generic(&x.q, &x.qd, &u.0, force, geom);
    Ok(Vector6::from_column_slice(&d))
}

/// Joint torques `J(q)ᵀ F` produced by a tool force.
pub fn contact_torque(q: &[f64; 3], force: &[f64; 3], geom: &RobotGeometry) -> [f64; 3] {
    let t = jacobian(q, geom).transpose() * Vector3::from_column_slice(force);
    [t[0], t[1], t[2]]
}

/// One classical Runge–Kutta step of `ẋ = f(x)` on fixed-size arrays.
pub fn rk4_step<D: Scalar, const N: usize>(f: impl Fn(&[D; N]) -> [D; N], x: &[D; N], dt: f64) -> [D; N] {
    let add = |a: &[D; N], k: &[D; N], h: f64| {
        let mut out = *a;
        for i in 0..N {
            out[i] += k[i] * h;
        }
        out
    };
    let k1 = f(x);
    let k2 = f(&add(x, &k1, 0.5 * dt));
    let k3 = f(&add(x, &k2, 0.5 * dt));
    let k4 = f(&add(x, &k3, dt));
    let mut out = *x;
    for i in 0..N {
        out[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
    }
    out
}

/// Axis-aligned box on `(q, q̇)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: [f64; 6],
    pub hi: [f64; 6],
}

impl StateBox {
    pub fn contains(&self, x: &JointState) -> bool {
        x.as_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lo[i] && *v <= self.hi[i])
    }

    /// Box with every bound multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut b = *self;
        for i in 0..6 {
            b.lo[i] *= factor;
            b.hi[i] *= factor;
        }
        b
    }
}

/// Fixed-step RK4 rollout under a piecewise-constant torque.
///
/// `force_law` maps the tool pose to the contact force vector and is
/// re-evaluated at every stage. If `sanity` is given, leaving it aborts the
/// rollout with [`Error::IntegrationDiverged`].
pub fn integrate_rk4(
    x: &JointState,
    u: &JointTorque,
    force_law: impl Fn(&Pose) -> [f64; 3],
    geom: &RobotGeometry,
    dt: f64,
    steps: usize,
    sanity: Option<&StateBox>,
) -> Result<JointState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !x.is_finite() || u.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("integrator input"));
    }
    let rhs = |s: &[f64; 6]| {
        let q = [s[0], s[1], s[2]];
        let force = force_law(&forward_kinematics(&q, geom));
        state_derivative_generic(&q, &[s[3], s[4], s[5]], &u.0, &force, geom)
    };
    let mut s = x.as_array();
    for k in 0..steps {
        s = rk4_step(rhs, &s, dt);
        let next = JointState::from_slice(&s);
        let out = !next.is_finite() || sanity.is_some_and(|b| !b.contains(&next));
        if out {
            return Err(Error::IntegrationDiverged {
                t: (k + 1) as f64 * dt,
            });
        }
    }
    Ok(JointState::from_slice(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, SMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn inverse_kinematics_round_trip() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let q = [rng.random_range(1.2..1.9), rng.random_range(0.3..1.0), rng.random_range(-2.0..-1.0)];
            let p = forward_kinematics(&q, &g).p;
            let guess = [q[0] + 0.05, q[1] - 0.05, q[2] + 0.05];
            let back = inverse_kinematics(&p, &guess, &g).unwrap();
            let p2 = forward_kinematics(&back, &g).p;
            assert!((0..3).all(|i| (p[i] - p2[i]).abs() < 1e-10));
        }
        assert!(inverse_kinematics(&[5.0, 0.0, 0.0], &[1.5, 0.7, -1.5], &g).is_err());
    }

    fn rand_q(rng: &mut ChaCha8Rng) -> [f64; 3] {
        [
            rng.random_range(-2.5..2.5),
            rng.random_range(-1.8..1.8),
            rng.random_range(-1.8..1.8),
        ]
    }

    fn straight_geometry() -> RobotGeometry {
        RobotGeometry {
            base: [0.0, 0.0, 0.4],
            ..RobotGeometry::default()
        }
    }

    #[test]
    fn home_configuration_points_along_y() {
        let g = straight_geometry();
        let p = forward_kinematics(&[0.0; 3], &g).p;
        let reach: f64 = g.lengths.iter().sum();
        assert!((p[0]).abs() < 1e-15);
        assert!((p[1] - reach).abs() < 1e-15);
        assert!((p[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn base_rotation_is_periodic() {
        let g = RobotGeometry::default();
        let q = [0.3, 0.7, -1.1];
        let a = forward_kinematics(&q, &g).p;
        let b = forward_kinematics(&[q[0] + 2.0 * PI, q[1], q[2]], &g).p;
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    fn rot_z(t: f64) -> Matrix4<f64> {
        let (s, c) = t.sin_cos();
        Matrix4::new(c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    }
    // pitch about the local x axis lifts +y towards +z
    fn rot_x(t: f64) -> Matrix4<f64> {
        let (s, c) = t.sin_cos();
        Matrix4::new(1.0, 0.0, 0.0, 0.0, 0.0, c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0)
    }
    fn trans_y(d: f64) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m[(1, 3)] = d;
        m
    }

    fn fk_homogeneous(q: &[f64; 3], g: &RobotGeometry) -> [f64; 3] {
        let mut base = Matrix4::identity();
        base[(0, 3)] = g.base[0];
        base[(1, 3)] = g.base[1];
        base[(2, 3)] = g.base[2];
        let t = base
            * rot_z(q[0])
            * trans_y(g.lengths[0])
            * rot_x(q[1])
            * trans_y(g.lengths[1])
            * rot_x(q[2])
            * trans_y(g.lengths[2]);
        [t[(0, 3)], t[(1, 3)], t[(2, 3)]]
    }

    #[test]
    fn matches_transform_product() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut qs = vec![[0.0, PI / 2.0, 0.0]];
        qs.extend((0..20).map(|_| rand_q(&mut rng)));
        for q in qs {
            let a = forward_kinematics(&q, &g).p;
            let b = fk_homogeneous(&q, &g);
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-12, "{q:?}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..10 {
            let q = rand_q(&mut rng);
            let j = jacobian(&q, &g);
            for col in 0..3 {
                let mut qp = q;
                let mut qm = q;
                qp[col] += h;
                qm[col] -= h;
                let pp = forward_kinematics(&qp, &g).p;
                let pm = forward_kinematics(&qm, &g).p;
                let fd: Vec<f64> = (0..3).map(|r| (pp[r] - pm[r]) / (2.0 * h)).collect();
                let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                for r in 0..3 {
                    assert!((j[(r, col)] - fd[r]).abs() / norm < 1e-6);
                }
            }
        }
    }

    #[test]
    fn stretched_arm_is_singular() {
        let g = RobotGeometry::default();
        for q2 in [-0.5, 0.0, 0.4, 1.2] {
            let j = jacobian(&[0.8, q2, 0.0], &g);
            assert!(j.determinant().abs() < 1e-12);
        }
        assert!(jacobian(&[0.8, 0.5, -1.0], &g).determinant().abs() > 1e-3);
    }

    #[test]
    fn jacobian_scales_with_lengths() {
        let g = RobotGeometry::default();
        let q = [0.4, 0.9, -1.3];
        let j = jacobian(&q, &g);
        let j2 = jacobian(&q, &g.scaled_lengths(1.7));
        assert!((j * 1.7 - j2).abs().max() < 1e-14);
    }

    #[test]
    fn inertia_is_symmetric_positive_definite() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let b = inertia(&rand_q(&mut rng), &g);
            assert!((b - b.transpose()).abs().max() < 1e-14);
            assert!(b.cholesky().is_some());
        }
    }

    /// Kinetic energy from the link-centre velocities, computed by finite
    /// differences of the centre positions. Checks B(q) independently.
    #[test]
    fn inertia_matches_kinetic_energy() {
        let g = RobotGeometry::default();
        let centres = |q: &[f64; 3]| -> [[f64; 3]; 3] {
            let half = RobotGeometry {
                lengths: [g.lengths[0] * 0.5, g.lengths[1], g.lengths[2]],
                ..g.clone()
            };
            let c1 = fk_homogeneous(&[q[0], 0.0, 0.0], &RobotGeometry { lengths: [half.lengths[0], 0.0, 0.0], ..g.clone() });
            let c2 = fk_homogeneous(q, &RobotGeometry { lengths: [g.lengths[0], g.lengths[1] * 0.5, 0.0], ..g.clone() });
            let c3 = fk_homogeneous(q, &RobotGeometry { lengths: [g.lengths[0], g.lengths[1], g.lengths[2] * 0.5], ..g.clone() });
            [c1, c2, c3]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let q = rand_q(&mut rng);
            let qd = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let h = 1e-6;
            let qp: [f64; 3] = std::array::from_fn(|i| q[i] + h * qd[i]);
            let qm: [f64; 3] = std::array::from_fn(|i| q[i] - h * qd[i]);
            let (cp, cm) = (centres(&qp), centres(&qm));
            let mut ke = 0.0;
            for l in 0..3 {
                let v2: f64 = (0..3).map(|k| ((cp[l][k] - cm[l][k]) / (2.0 * h)).powi(2)).sum();
                ke += 0.5 * g.masses[l] * v2;
            }
            // rotational energy: link 1 spins about z, links 2 and 3 about z and the pitch axis
            let pitch = [q[1], q[1] + q[2]];
            let wz = qd[0];
            ke += 0.5 * g.link_inertia[0] * wz * wz;
            let wp = [qd[1], qd[1] + qd[2]];
            for l in 0..2 {
                let cz = pitch[l].cos();
                ke += 0.5 * g.link_inertia[l + 1] * (wz * wz * cz * cz + wp[l] * wp[l]);
            }
            for j in 0..3 {
                ke += 0.5 * g.joint_inertia[j] * qd[j] * qd[j];
            }
            let v = Vector3::from_column_slice(&qd);
            let ke_b = 0.5 * (v.transpose() * inertia(&q, &g) * v)[0];
            assert!((ke - ke_b).abs() < 1e-7 * ke.max(1e-3), "{ke} vs {ke_b}");
        }
    }

    #[test]
    fn static_force_balance() {
        let g = RobotGeometry::default();
        let q = [1.5, 0.7, -1.4];
        let f = [-3.0, 0.2, 0.5];
        let u = JointTorque(contact_torque(&q, &f, &g));
        let d = state_derivative(&JointState::at_rest(q), &u, &f, &g).unwrap();
        assert!(d.abs().max() < 1e-12);
        let d0 = state_derivative(&JointState::at_rest(q), &JointTorque::default(), &[0.0; 3], &g).unwrap();
        assert_eq!(d0, Vector6::zeros());
    }

    #[test]
    fn acceleration_matches_dense_solve() {
        let g = RobotGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let x = JointState::new(rand_q(&mut rng), [rng.random_range(-1.0..1.0), 0.2, -0.1]);
            let u = JointTorque([rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
            let f = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.3];
            let d = state_derivative(&x, &u, &f, &g).unwrap();
            let rhs = Vector3::from_column_slice(&u.0) - jacobian(&x.q, &g).transpose() * Vector3::from_column_slice(&f);
            let acc = inertia(&x.q, &g).lu().solve(&rhs).unwrap();
            for i in 0..3 {
                assert_eq!(d[i], x.qd[i]);
                assert!((d[3 + i] - acc[i]).abs() < 1e-10 * (1.0 + acc[i].abs()));
            }
        }
        let bad = JointState::new([f64::NAN, 0.0, 0.0], [0.0; 3]);
        assert!(state_derivative(&bad, &JointTorque::default(), &[0.0; 3], &g).is_err());
    }

    #[test]
    fn zero_field_keeps_state() {
        let g = RobotGeometry::default();
        let x = JointState::at_rest([1.5, 0.7, -1.4]);
        let y = integrate_rk4(&x, &JointTorque::default(), |_| [0.0; 3], &g, 1e-3, 100, None).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rk4_fourth_order_on_linear_system() {
        // damped oscillator, exact solution via the matrix exponential
        let a = SMatrix::<f64, 2, 2>::new(0.0, 1.0, -4.0, -0.4);
        let x0 = [1.0, 0.0];
        let t_end = 1.0;
        let exact = (a * t_end).exp() * nalgebra::Vector2::new(x0[0], x0[1]);
        let err = |n: usize| {
            let dt = t_end / n as f64;
            let mut x = x0;
            for _ in 0..n {
                x = rk4_step(|s: &[f64; 2]| {
                    let v = a * nalgebra::Vector2::new(s[0], s[1]);
                    [v[0], v[1]]
                }, &x, dt);
            }
            ((x[0] - exact[0]).powi(2) + (x[1] - exact[1]).powi(2)).sqrt()
        };
        let (e1, e2) = (err(20), err(40));
        let order = (e1 / e2).log2();
        assert!(order >= 3.9, "observed order {order}");
    }

    #[test]
    fn base_spin_conserves_energy() {
        let g = RobotGeometry::default();
        let x = JointState::new([0.2, 0.6, -1.2], [0.8, 0.0, 0.0]);
        let energy = |s: &JointState| {
            let v = Vector3::from_column_slice(&s.qd);
            0.5 * (v.transpose() * inertia(&s.q, &g) * v)[0]
        };
        let y = integrate_rk4(&x, &JointTorque::default(), |_| [0.0; 3], &g, 1e-3, 1000, None).unwrap();
        assert!(((energy(&y) - energy(&x)) / energy(&x)).abs() < 1e-6);
        assert!((y.q[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let g = RobotGeometry::default();
        let sanity = StateBox { lo: [-1.0; 6], hi: [1.0; 6] };
        let x = JointState::at_rest([0.0, 0.5, -0.5]);
        let r = integrate_rk4(&x, &JointTorque([0.0, 50.0, 0.0]), |_| [0.0; 3], &g, 1e-3, 2000, Some(&sanity));
        assert!(matches!(r, Err(Error::IntegrationDiverged { .. })));
        assert!(integrate_rk4(&x, &JointTorque::default(), |_| [0.0; 3], &g, 0.0, 1, None).is_err());
    }
}
