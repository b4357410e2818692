//! Simulated plant contact: the force the real surface pushes back with.

use serde::{Deserialize, Serialize};

use crate::contact::{penetration_depth, SurfaceGeometry};
use crate::dynamics::{forward_kinematics, Pose, RobotGeometry};
use crate::error::{Error, Result};
use crate::gp::{build_posterior, Dataset, GpPosterior, KernelConfig};

/// Bumpy, tilted surface `F = K(y, z)·max(0, δ − o(y, z))^β`.
///
/// `K = k0·(1 + tilt·(y − y_ref)/span + bump·sin(2π(y − y_ref)/wavelength_y)·cos(2π(z − z_ref)/wavelength_z))`
/// and `o = offset + offset_amplitude·sin(2π(y − y_ref)/wavelength_y + π/3)`.
/// A positive offset means the material only starts resisting below the
/// nominal plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticTruth {
    pub k0: f64,
    pub exponent: f64,
    pub tilt: f64,
    pub bump: f64,
    pub y_ref: f64,
    pub z_ref: f64,
    pub span: f64,
    pub wavelength_y: f64,
    pub wavelength_z: f64,
    /// [m]
    pub offset: f64,
    pub offset_amplitude: f64,
}

impl Default for AnalyticTruth {
    fn default() -> Self {
        Self {
            k0: 4000.0,
            exponent: 1.45,
            tilt: 0.25,
            bump: 0.2,
            y_ref: 0.2,
            z_ref: 0.68,
            span: 0.05,
            wavelength_y: 0.08,
            wavelength_z: 0.06,
            offset: 0.0008,
            offset_amplitude: 0.0006,
        }
    }
}

impl AnalyticTruth {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.k0,
            self.exponent,
            self.tilt,
            self.bump,
            self.y_ref,
            self.z_ref,
            self.span,
            self.wavelength_y,
            self.wavelength_z,
            self.offset,
            self.offset_amplitude,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("analytic truth parameters"));
        }
        if !(self.k0 > 0.0) || !(self.exponent >= 1.0) || !(self.span > 0.0) || !(self.wavelength_y > 0.0) || !(self.wavelength_z > 0.0) {
            return Err(Error::Config("truth needs k0 > 0, exponent >= 1 and positive length scales".into()));
        }
        if self.tilt.abs() + self.bump.abs() >= 1.0 {
            return Err(Error::Config("truth stiffness field must stay positive (|tilt| + |bump| < 1)".into()));
        }
        if self.offset - self.offset_amplitude.abs() < 0.0 {
            return Err(Error::Config("truth offset must stay nonnegative".into()));
        }
        Ok(())
    }

    /// `K(y, z)`.
    pub fn stiffness(&self, y: f64, z: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        let dy = y - self.y_ref;
        let dz = z - self.z_ref;
        self.k0 * (1.0 + self.tilt * dy / self.span + self.bump * (tau * dy / self.wavelength_y).sin() * (tau * dz / self.wavelength_z).cos())
    }

    /// `o(y, z)` [m].
    pub fn contact_offset(&self, y: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        self.offset + self.offset_amplitude * (tau * (y - self.y_ref) / self.wavelength_y + std::f64::consts::FRAC_PI_3).sin()
    }

    pub fn force(&self, delta: f64, y: f64, z: f64) -> f64 {
        let d = delta - self.contact_offset(y);
        if d <= 0.0 {
            0.0
        } else {
            self.stiffness(y, z) * d.powf(self.exponent)
        }
    }
}

/// Stiffness field learned by a GP on `(y, z) ↦ ln K`, used with the
/// analytic exponent and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct GpTruth {
    pub base: AnalyticTruth,
    pub log_stiffness: GpPosterior,
}

impl GpTruth {
    /// Fits the field on a `side × side` grid over `[y_lo, y_hi] × [z_lo, z_hi]`
    /// with fixed kernel hyperparameters.
    pub fn from_analytic(base: &AnalyticTruth, y: (f64, f64), z: (f64, f64), side: usize) -> Result<Self> {
        base.validate()?;
        if side < 2 {
            return Err(Error::InvalidArgument("dense truth grid needs at least 2 points per side".into()));
        }
        let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (side - 1) as f64;
        let mut rows = Vec::with_capacity(side * side);
        let mut vals = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                let (py, pz) = (lin(y.0, y.1, i), lin(z.0, z.1, j));
                rows.push(vec![py, pz]);
                vals.push(base.stiffness(py, pz).ln());
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let mut kernel = KernelConfig::new(var.max(1e-6), vec![0.25 * base.wavelength_y, 0.25 * base.wavelength_z]);
        kernel.prior_mean = mean;
        let data = Dataset::from_rows(&rows, &vals, 0.0)?;
        let log_stiffness = build_posterior(&data, &kernel, 1e-8)?;
        Ok(Self { base: *base, log_stiffness })
    }

    pub fn force(&self, delta: f64, y: f64, z: f64) -> f64 {
        let d = delta - self.base.contact_offset(y);
        if d <= 0.0 {
            0.0
        } else {
            self.log_stiffness.mean(&[y, z]).exp() * d.powf(self.base.exponent)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruthForce {
    Analytic(AnalyticTruth),
    Gp(GpTruth),
}

impl GroundTruthForce {
    /// Normal force at joint angles `q`; zero out of contact.
    pub fn force(&self, q: &[f64; 3], geom: &RobotGeometry, surf: &SurfaceGeometry) -> f64 {
        self.force_at_pose(&forward_kinematics(q, geom), surf)
    }

    pub fn force_at_pose(&self, p: &Pose, surf: &SurfaceGeometry) -> f64 {
        let delta = penetration_depth(p, surf);
        let (y, z) = (p.p[1], p.p[2]);
        match self {
            GroundTruthForce::Analytic(t) => t.force(delta, y, z),
            GroundTruthForce::Gp(t) => t.force(delta, y, z),
        }
    }

    fn base(&self) -> &AnalyticTruth {
        match self {
            GroundTruthForce::Analytic(t) => t,
            GroundTruthForce::Gp(t) => &t.base,
        }
    }

    /// Penetration of the nominal plane at which contact starts, at lateral position `y`.
    pub fn contact_offset(&self, y: f64) -> f64 {
        self.base().contact_offset(y)
    }

    /// Whether the tool touches the material at `q`.
    pub fn in_contact(&self, q: &[f64; 3], geom: &RobotGeometry, surf: &SurfaceGeometry) -> bool {
        let p = forward_kinematics(q, geom);
        penetration_depth(&p, surf) > self.contact_offset(p.p[1])
    }

    /// Penetration at which the force at `(y, z)` equals `target`.
    pub fn penetration_for(&self, target: f64, y: f64, z: f64) -> Result<f64> {
        if !(target >= 0.0) {
            return Err(Error::InvalidArgument(format!("target force must be nonnegative, got {target}")));
        }
        let f = |d: f64| match self {
            GroundTruthForce::Analytic(t) => t.force(d, y, z),
            GroundTruthForce::Gp(t) => t.force(d, y, z),
        };
        let (mut lo, mut hi) = (0.0, 1e-3);
        while f(hi) < target {
            hi *= 2.0;
            if hi > 1.0 {
                return Err(Error::InvalidArgument(format!("force {target} N unreachable within 1 m")));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_until_offset_then_power_law() {
        let t = AnalyticTruth::default();
        t.validate().unwrap();
        let (y, z) = (0.17, 0.69);
        let o = t.contact_offset(y);
        assert!(o > 0.0);
        assert_eq!(t.force(0.0, y, z), 0.0);
        assert_eq!(t.force(o, y, z), 0.0);
        let d = o + 0.004;
        let expect = t.stiffness(y, z) * 0.004f64.powf(t.exponent);
        assert!((t.force(d, y, z) - expect).abs() < 1e-12);
        // continuity at the contact boundary
        assert!(t.force(o + 1e-9, y, z) < 1e-9);
    }

    #[test]
    fn stiffness_field_stays_positive() {
        let t = AnalyticTruth::default();
        for i in 0..50 {
            for j in 0..50 {
                assert!(t.stiffness(0.1 + 0.004 * i as f64, 0.6 + 0.004 * j as f64) > 0.0);
            }
        }
        let bad = AnalyticTruth { tilt: 0.6, bump: 0.5, ..t };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dense_gp_truth_tracks_analytic() {
        let t = AnalyticTruth::default();
        let g = GpTruth::from_analytic(&t, (0.12, 0.28), (0.64, 0.72), 23).unwrap();
        assert!(g.log_stiffness.len() >= 500);
        for (y, z) in [(0.15, 0.68), (0.2, 0.7), (0.23, 0.66)] {
            let (a, b) = (t.force(0.008, y, z), g.force(0.008, y, z));
            assert!((a - b).abs() < 1e-3 * a, "{a} {b}");
        }
    }

    #[test]
    fn penetration_inverse() {
        let g = GroundTruthForce::Analytic(AnalyticTruth::default());
        let d = g.penetration_for(3.0, 0.15, 0.68).unwrap();
        let GroundTruthForce::Analytic(t) = &g else { unreachable!() };
        assert!((t.force(d, 0.15, 0.68) - 3.0).abs() < 1e-9);
    }
}
