use std::time::Instant;

use super::model::OcpModel;
use super::nlp::{transcribe, Relaxation};
use super::sqp::{solve_sqp, OcpSolution, WarmStart};
use super::{tighten_output_box, ConstraintSet, OcpConfig, TighteningMode, TighteningPolicy};
use crate::dynamics::JointState;
use crate::error::{Error, Result};
use crate::pathref::{PathDefinition, VirtualState};

/// Per-step solver report. `held` marks a step where the solver failed and
/// the previous input was reapplied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// solver wall time [s]
    pub wall_time: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub feasible: bool,
    pub converged: bool,
    pub relaxation: Relaxation,
    pub objective: f64,
    pub max_slack: f64,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub torque: [f64; 3],
    /// virtual input driving `θ̈`
    pub v: f64,
    pub diagnostics: StepDiagnostics,
}

/// Receding-horizon controller. Keeps the previous solution for warm
/// starting and the last applied input for the hold fallback.
pub struct Controller<M: OcpModel> {
    pub model: M,
    pub path: PathDefinition,
    pub cfg: OcpConfig,
    pub constraints: ConstraintSet,
    pub policy: TighteningPolicy,
    /// σ_max for [`TighteningMode::WorstCase`]
    pub sigma_max: Option<f64>,
    previous: Option<OcpSolution>,
    last_input: Option<[f64; 4]>,
}

impl<M: OcpModel> Controller<M> {
    pub fn new(
        model: M,
        path: PathDefinition,
        cfg: OcpConfig,
        constraints: ConstraintSet,
        policy: TighteningPolicy,
        sigma_max: Option<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        constraints.validate()?;
        policy.validate()?;
        path.validate((constraints.force_lo, constraints.force_hi))?;
        // constant back-offs are known up front; an empty set is a setup error
        match (policy.mode, sigma_max) {
            (TighteningMode::WorstCase, None) => return Err(Error::Config("worst-case tightening needs σ_max".into())),
            (TighteningMode::WorstCase, Some(s)) => {
                tighten_output_box(constraints.force_lo, constraints.force_hi, policy.confidence * s)?;
            }
            (TighteningMode::Fixed, _) => {
                tighten_output_box(constraints.force_lo, constraints.force_hi, policy.backoff)?;
            }
            _ => {}
        }
        Ok(Self { model, path, cfg, constraints, policy, sigma_max, previous: None, last_input: None })
    }

    /// Forgets the warm start and the held input.
    pub fn reset(&mut self) {
        self.previous = None;
        self.last_input = None;
    }

    pub fn last_solution(&self) -> Option<&OcpSolution> {
        self.previous.as_ref()
    }

    /// Solves the OCP at `(x, z)` and returns the first input.
    pub fn mpc_step(&mut self, x: &JointState, z: &VirtualState) -> Result<StepOutput> {
        let start = Instant::now();
        let nlp = transcribe(x, z, &self.model, &self.path, &self.cfg, &self.constraints, &self.policy, self.sigma_max)?;
        let warm = match &self.previous {
            Some(prev) => WarmStart::shifted(prev),
            None => WarmStart::cold(&nlp)?,
        };
        let sol = solve_sqp(&nlp, &warm)?;
        let wall_time = start.elapsed().as_secs_f64();
        if !sol.converged {
            log::debug!("SQP stopped after {} iterations, kkt {:.3e}", sol.iterations, sol.kkt_residual);
        }
        let mut c = sol.controls[0];
        c[3] = forward_only(z.z2, c[3], self.cfg.dt);
        let diagnostics = StepDiagnostics {
            wall_time,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            feasible: sol.feasible,
            converged: sol.converged,
            relaxation: sol.relaxation,
            objective: sol.objective,
            max_slack: sol.max_slack,
            held: false,
        };
        self.previous = Some(sol);
        self.last_input = Some(c);
        Ok(StepOutput { torque: [c[0], c[1], c[2]], v: c[3], diagnostics })
    }

    /// [`Controller::mpc_step`], falling back to the previous input (zero
    /// on the very first step) when the solver fails.
    pub fn step_or_hold(&mut self, x: &JointState, z: &VirtualState) -> StepOutput {
        let start = Instant::now();
        match self.mpc_step(x, z) {
            Ok(out) => out,
            Err(e) => {
                log::warn!("OCP solve failed ({e}); holding the previous input");
                self.previous = None;
                let c = self.last_input.unwrap_or([0.0; 4]);
                StepOutput {
                    torque: [c[0], c[1], c[2]],
                    v: forward_only(z.z2, c[3], self.cfg.dt),
                    diagnostics: StepDiagnostics {
                        wall_time: start.elapsed().as_secs_f64(),
                        iterations: 0,
                        kkt_residual: f64::NAN,
                        feasible: false,
                        converged: false,
                        relaxation: Relaxation::NoStateBoxes,
                        objective: f64::NAN,
                        max_slack: f64::NAN,
                        held: true,
                    },
                }
            }
        }
    }
}

/// Raises `v` just enough that the path speed cannot turn negative over one
/// step. The solver meets `z₂ ≥ 0` only to its tolerance, which at a standstill
/// would let θ creep backwards by round-off.
pub fn forward_only(z2: f64, v: f64, dt: f64) -> f64 {
    let floor = if z2 >= 0.0 { -z2 / dt } else { -2.0 * z2 / dt };
    v.max(floor)
}

#[cfg(test)]
mod tests {
    use super::forward_only;
    use crate::pathref::{virtual_step, VirtualState};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn theta_never_moves_back(z1 in -1.0f64..0.0, z2 in -1e-9f64..1.0, v in -10.0f64..0.5, dt in 1e-3f64..0.05) {
            let z = VirtualState { z1, z2 };
            let next = virtual_step(&z, forward_only(z2, v, dt), dt);
            prop_assert!(next.z1 >= z1 - 1e-15 * z1.abs());
            prop_assert!(next.z2 >= -1e-15 * z2.abs().max(1.0));
        }
    }

    #[test]
    fn admissible_input_is_untouched() {
        assert_eq!(forward_only(0.5, -3.0, 0.01), -3.0);
        assert_eq!(forward_only(0.0, 0.2, 0.01), 0.2);
        assert_eq!(forward_only(0.0, -1e-13, 0.01), 0.0);
    }
}
