//! Direct multiple-shooting transcription.
//!
//! Shooting node `s_k = (q, q̇, θ, θ̇) ∈ ℝ⁸`, piecewise-constant control
//! `c_k = (u, v) ∈ ℝ⁴`. The objective is a sum of squared residuals:
//! `√(dt·Q)·(e_pf, θ)` and `√(dt·R)·c` per interval, and `√Q_E·s_N` at the
//! end.

use nalgebra::{DMatrix, SMatrix, SVector};

use super::model::OcpModel;
use super::{tighten_output_box, ConstraintSet, OcpConfig, TighteningMode, TighteningPolicy};
use crate::dynamics::JointState;
use crate::error::{Error, Result};
use crate::pathref::{PathDefinition, VirtualState};

pub const NX: usize = 8;
pub const NU: usize = 4;

pub type State = [f64; NX];
pub type Control = [f64; NU];

/// Which state-box relaxation the problem was built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Relaxation {
    Exact,
    /// boxes widened to contain the measured initial state
    WidenedInitial,
    /// state boxes dropped
    NoStateBoxes,
}

/// Force-output bounds after tightening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForceBounds {
    Constant { lo: f64, hi: f64 },
    /// `[lo + c·σ(q), hi − c·σ(q)]` at each node
    Pointwise { lo: f64, hi: f64, confidence: f64 },
}

/// Transcribed problem. The model, path and configuration are borrowed.
pub struct Nlp<'a, M: OcpModel> {
    pub model: &'a M,
    pub path: &'a PathDefinition,
    pub cfg: &'a OcpConfig,
    pub x0: State,
    pub state_lo: State,
    pub state_hi: State,
    pub input_lo: Control,
    pub input_hi: Control,
    pub force: ForceBounds,
    pub relaxation: Relaxation,
}

impl<M: OcpModel> PartialEq for Nlp<'_, M> {
    fn eq(&self, o: &Self) -> bool {
        std::ptr::eq(self.model, o.model)
            && self.path == o.path
            && self.cfg == o.cfg
            && self.x0 == o.x0
            && self.state_lo == o.state_lo
            && self.state_hi == o.state_hi
            && self.input_lo == o.input_lo
            && self.input_hi == o.input_hi
            && self.force == o.force
            && self.relaxation == o.relaxation
    }
}

impl<M: OcpModel> std::fmt::Debug for Nlp<'_, M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Nlp")
            .field("x0", &self.x0)
            .field("state_lo", &self.state_lo)
            .field("state_hi", &self.state_hi)
            .field("input_lo", &self.input_lo)
            .field("input_hi", &self.input_hi)
            .field("force", &self.force)
            .field("relaxation", &self.relaxation)
            .finish()
    }
}

const BOX_TOL: f64 = 1e-9;

/// Builds the NLP for the measured state `(x0, z0)`.
///
/// `sigma_max` is required for [`TighteningMode::WorstCase`].
#[allow(clippy::too_many_arguments)]
pub fn transcribe<'a, M: OcpModel>(
    x0: &JointState,
    z0: &VirtualState,
    model: &'a M,
    path: &'a PathDefinition,
    cfg: &'a OcpConfig,
    constraints: &ConstraintSet,
    policy: &TighteningPolicy,
    sigma_max: Option<f64>,
) -> Result<Nlp<'a, M>> {
    cfg.validate()?;
    constraints.validate()?;
    policy.validate()?;
    if !x0.is_finite() || !z0.z1.is_finite() || !z0.z2.is_finite() {
        return Err(Error::NonFinite("initial state"));
    }
    let mut s0 = [0.0; NX];
    s0[..6].copy_from_slice(&x0.as_array());
    s0[6] = z0.z1;
    s0[7] = z0.z2;

    let (mut lo, mut hi) = constraints.state_box();
    // the measured state only has to lie in the true box, not the shrunk one
    let outside = (0..NX).any(|i| s0[i] < lo[i] - BOX_TOL || s0[i] > hi[i] + BOX_TOL);
    for i in 3..6 {
        let c = 0.5 * (lo[i] + hi[i]);
        let half = 0.5 * (hi[i] - lo[i]) * (1.0 - cfg.velocity_margin);
        lo[i] = c - half;
        hi[i] = c + half;
    }
    let relaxation = if outside {
        log::debug!("initial state outside the state box, solving with a widened box");
        for i in 0..NX {
            lo[i] = lo[i].min(s0[i]);
            hi[i] = hi[i].max(s0[i]);
        }
        Relaxation::WidenedInitial
    } else {
        Relaxation::Exact
    };

    let (flo, fhi) = (constraints.force_lo, constraints.force_hi);
    let force = match policy.mode {
        TighteningMode::None => ForceBounds::Constant { lo: flo, hi: fhi },
        TighteningMode::Fixed => {
            let (a, b) = tighten_output_box(flo, fhi, policy.backoff)?;
            ForceBounds::Constant { lo: a, hi: b }
        }
        TighteningMode::WorstCase => {
            let s = sigma_max.ok_or_else(|| Error::Config("worst-case tightening needs σ_max".into()))?;
            let (a, b) = tighten_output_box(flo, fhi, policy.confidence * s)?;
            ForceBounds::Constant { lo: a, hi: b }
        }
        TighteningMode::Pointwise if policy.confidence == 0.0 => ForceBounds::Constant { lo: flo, hi: fhi },
        TighteningMode::Pointwise => ForceBounds::Pointwise { lo: flo, hi: fhi, confidence: policy.confidence },
    };
    let (input_lo, input_hi) = constraints.input_box();
    Ok(Nlp {
        model,
        path,
        cfg,
        x0: s0,
        state_lo: lo,
        state_hi: hi,
        input_lo,
        input_hi,
        force,
        relaxation,
    })
}

/// Values and first-order data of the NLP at one iterate.
pub(crate) struct Linearization {
    pub a: Vec<SMatrix<f64, NX, NX>>,
    pub b: Vec<SMatrix<f64, NX, NU>>,
    pub defects: Vec<SVector<f64, NX>>,
    /// stage residuals on `(e_pf, θ)` and their state Jacobians, k = 0..N−1
    pub r_stage: Vec<SVector<f64, 4>>,
    pub j_stage: Vec<SMatrix<f64, 4, NX>>,
    /// control residual weights `√(dt·R)`
    pub w_ctrl: [f64; NU],
    /// terminal residual weights `√Q_E`
    pub w_term: [f64; NX],
    /// predicted force and its q-gradient at nodes 0..N
    pub force: Vec<f64>,
    pub dforce: Vec<[f64; 3]>,
    pub force_lo: Vec<f64>,
    pub force_hi: Vec<f64>,
}

impl<M: OcpModel> Nlp<'_, M> {
    pub fn horizon(&self) -> usize {
        self.cfg.horizon_steps
    }

    pub(crate) fn w_ctrl(&self) -> [f64; NU] {
        let dt = self.cfg.dt;
        self.cfg.r_weights.map(|r| (dt * r).sqrt())
    }

    pub(crate) fn w_term(&self) -> [f64; NX] {
        self.cfg.terminal_weights.map(f64::sqrt)
    }

    fn w_stage(&self) -> [f64; 4] {
        let dt = self.cfg.dt;
        self.cfg.q_weights.map(|q| (dt * q).sqrt())
    }

    /// One shooting interval, arm by the model and `(θ, θ̇)` exactly.
    pub fn step_value(&self, s: &State, c: &Control) -> Result<State> {
        let dt = self.cfg.dt;
        let arm = self.model.step_value(&[s[0], s[1], s[2], s[3], s[4], s[5]], &[c[0], c[1], c[2]], dt)?;
        let mut out = [0.0; NX];
        out[..6].copy_from_slice(&arm);
        out[6] = s[6] + dt * s[7] + 0.5 * dt * dt * c[3];
        out[7] = s[7] + dt * c[3];
        Ok(out)
    }

    fn step_linear(&self, s: &State, c: &Control) -> Result<(State, SMatrix<f64, NX, NX>, SMatrix<f64, NX, NU>)> {
        let dt = self.cfg.dt;
        let (arm, j) = self.model.step(&[s[0], s[1], s[2], s[3], s[4], s[5]], &[c[0], c[1], c[2]], dt)?;
        let mut out = [0.0; NX];
        out[..6].copy_from_slice(&arm);
        out[6] = s[6] + dt * s[7] + 0.5 * dt * dt * c[3];
        out[7] = s[7] + dt * c[3];
        let mut a = SMatrix::<f64, NX, NX>::zeros();
        let mut b = SMatrix::<f64, NX, NU>::zeros();
        a.fixed_view_mut::<6, 6>(0, 0).copy_from(&j.fixed_view::<6, 6>(0, 0));
        b.fixed_view_mut::<6, 3>(0, 0).copy_from(&j.fixed_view::<6, 3>(0, 6));
        a[(6, 6)] = 1.0;
        a[(6, 7)] = dt;
        a[(7, 7)] = 1.0;
        b[(6, 3)] = 0.5 * dt * dt;
        b[(7, 3)] = dt;
        Ok((out, a, b))
    }

    /// Force bounds at a node with joint angles `q`.
    pub fn force_bounds_at(&self, q: &[f64; 3]) -> Result<(f64, f64)> {
        Ok(match self.force {
            ForceBounds::Constant { lo, hi } => (lo, hi),
            ForceBounds::Pointwise { lo, hi, confidence } => {
                let b = confidence * self.model.force_std(q)?;
                let (a, c) = (lo + b, hi - b);
                if a <= c {
                    (a, c)
                } else {
                    log::warn!("pointwise back-off {b} empties the force box; collapsing to its midpoint");
                    let m = 0.5 * (lo + hi);
                    (m, m)
                }
            }
        })
    }

    /// Stage residual `√(dt·Q)·(r(θ) − y(q), θ)` and its Jacobian.
    fn stage_residual(&self, s: &State) -> (SVector<f64, 4>, SMatrix<f64, 4, NX>, f64, [f64; 3]) {
        let w = self.w_stage();
        let q = [s[0], s[1], s[2]];
        let (y, dy) = self.model.outputs(&q);
        let r = self.path.eval_generic(s[6]);
        let dr = self.path.derivative(s[6]);
        let mut res = SVector::<f64, 4>::zeros();
        let mut jac = SMatrix::<f64, 4, NX>::zeros();
        for i in 0..3 {
            res[i] = w[i] * (r[i] - y[i]);
            for c in 0..3 {
                jac[(i, c)] = -w[i] * dy[(i, c)];
            }
            jac[(i, 6)] = w[i] * dr[i];
        }
        res[3] = w[3] * s[6];
        jac[(3, 6)] = w[3];
        (res, jac, y[2], [dy[(2, 0)], dy[(2, 1)], dy[(2, 2)]])
    }

    /// Objective, predicted forces at nodes 0..N and per-node force bounds.
    pub(crate) fn objective_parts(&self, states: &[State], controls: &[Control]) -> Result<(f64, Vec<f64>)> {
        let n = self.horizon();
        let wc = self.w_ctrl();
        let wt = self.w_term();
        let mut f = 0.0;
        let mut forces = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let (r, _, force, _) = self.stage_residual(&states[k]);
            forces.push(force);
            if k < n {
                f += r.norm_squared();
                f += (0..NU).map(|i| (wc[i] * controls[k][i]).powi(2)).sum::<f64>();
            } else {
                f += (0..NX).map(|i| (wt[i] * states[n][i]).powi(2)).sum::<f64>();
            }
        }
        Ok((f, forces))
    }

    pub(crate) fn linearize(&self, states: &[State], controls: &[Control]) -> Result<Linearization> {
        let n = self.horizon();
        let mut lin = Linearization {
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            defects: Vec::with_capacity(n),
            r_stage: Vec::with_capacity(n),
            j_stage: Vec::with_capacity(n),
            w_ctrl: self.w_ctrl(),
            w_term: self.w_term(),
            force: Vec::with_capacity(n + 1),
            dforce: Vec::with_capacity(n + 1),
            force_lo: Vec::with_capacity(n + 1),
            force_hi: Vec::with_capacity(n + 1),
        };
        for k in 0..=n {
            let s = &states[k];
            let (r, j, force, dforce) = self.stage_residual(s);
            let (flo, fhi) = self.force_bounds_at(&[s[0], s[1], s[2]])?;
            lin.force.push(force);
            lin.dforce.push(dforce);
            lin.force_lo.push(flo);
            lin.force_hi.push(fhi);
            if k < n {
                lin.r_stage.push(r);
                lin.j_stage.push(j);
                let (next, a, b) = self.step_linear(s, &controls[k])?;
                lin.a.push(a);
                lin.b.push(b);
                lin.defects.push(SVector::from(next) - SVector::from(states[k + 1]));
            }
        }
        Ok(lin)
    }

    /// Forward simulation of `controls` from `x0`.
    pub fn rollout(&self, controls: &[Control]) -> Result<Vec<State>> {
        let mut out = Vec::with_capacity(controls.len() + 1);
        out.push(self.x0);
        for c in controls {
            let next = self.step_value(out.last().expect("nonempty"), c)?;
            out.push(next);
        }
        Ok(out)
    }
}

/// Sensitivities `Δs_k = G_k Δc + g_k` of the linearized shooting
/// recursion with `Δs_0 = 0`.
pub(crate) fn condense(lin: &Linearization) -> (Vec<DMatrix<f64>>, Vec<SVector<f64, NX>>) {
    let n = lin.a.len();
    let nc = NU * n;
    let mut gs = Vec::with_capacity(n + 1);
    let mut offs = Vec::with_capacity(n + 1);
    gs.push(DMatrix::zeros(NX, nc));
    offs.push(SVector::zeros());
    for k in 0..n {
        let prev = &gs[k];
        let mut next = DMatrix::zeros(NX, nc);
        // only the first k control blocks influence node k
        let used = NU * k;
        if used > 0 {
            let a = DMatrix::from_column_slice(NX, NX, lin.a[k].as_slice());
            let block = a * prev.columns(0, used);
            next.columns_mut(0, used).copy_from(&block);
        }
        for r in 0..NX {
            for c in 0..NU {
                next[(r, used + c)] = lin.b[k][(r, c)];
            }
        }
        gs.push(next);
        offs.push(lin.a[k] * offs[k] + lin.defects[k]);
    }
    (gs, offs)
}

/// Objective of the rollout of `controls` and its Gauss-Newton gradient
/// `2 Jᵀ r` with respect to the controls (exact for least squares).
pub fn objective_and_gradient<M: OcpModel>(nlp: &Nlp<'_, M>, controls: &[Control]) -> Result<(f64, Vec<f64>)> {
    let n = nlp.horizon();
    if controls.len() != n {
        return Err(Error::InvalidArgument(format!("expected {n} controls, got {}", controls.len())));
    }
    let states = nlp.rollout(controls)?;
    let lin = nlp.linearize(&states, controls)?;
    let (gs, _) = condense(&lin);
    let mut grad = nalgebra::DVector::zeros(NU * n);
    let mut f = 0.0;
    for k in 0..n {
        let r = &lin.r_stage[k];
        f += r.norm_squared();
        let m = DMatrix::from_column_slice(4, NX, lin.j_stage[k].as_slice()) * &gs[k];
        grad += 2.0 * m.tr_mul(&nalgebra::DVector::from_column_slice(r.as_slice()));
        for i in 0..NU {
            let rc = lin.w_ctrl[i] * controls[k][i];
            f += rc * rc;
            grad[NU * k + i] += 2.0 * lin.w_ctrl[i] * rc;
        }
    }
    for i in 0..NX {
        let rt = lin.w_term[i] * states[n][i];
        f += rt * rt;
        if lin.w_term[i] != 0.0 {
            grad += 2.0 * lin.w_term[i] * rt * gs[n].row(i).transpose();
        }
    }
    Ok((f, grad.iter().copied().collect()))
}
