//! Gauss-Newton SQP on the condensed shooting problem with an ℓ1 merit
//! line search.

use nalgebra::{DMatrix, DVector, SVector};

use super::model::OcpModel;
use super::nlp::{condense, Control, Linearization, Nlp, Relaxation, State, NU, NX};
use super::qp::{solve_qp, DenseQp, QpOptions};
use crate::error::{Error, Result};

const FEAS_TOL: f64 = 1e-6;
const REG: f64 = 1e-10;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 20;

/// Initial guess for the shooting variables.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub controls: Vec<Control>,
    /// nodes 0..N; node 0 is replaced by the measured state
    pub states: Vec<State>,
}

impl WarmStart {
    /// Previous solution shifted by one interval, last interval repeated.
    pub fn shifted(sol: &OcpSolution) -> Self {
        let mut controls: Vec<Control> = sol.controls.iter().skip(1).copied().collect();
        controls.push(*sol.controls.last().expect("nonempty horizon"));
        let mut states: Vec<State> = sol.states.iter().skip(1).copied().collect();
        states.push(*sol.states.last().expect("nonempty horizon"));
        Self { controls, states }
    }

    /// Torques holding the reference force at the current posture, no
    /// path acceleration, and the resulting rollout.
    pub fn cold<M: OcpModel>(nlp: &Nlp<'_, M>) -> Result<Self> {
        let x0 = nlp.x0;
        let f_ref = nlp.path.eval_generic(x0[6].clamp(crate::pathref::THETA_MIN, crate::pathref::THETA_MAX))[2];
        let u = nlp.model.static_torque(&[x0[0], x0[1], x0[2]], f_ref);
        let mut c = [u[0], u[1], u[2], 0.0];
        for i in 0..NU {
            c[i] = c[i].clamp(nlp.input_lo[i], nlp.input_hi[i]);
        }
        let controls = vec![c; nlp.horizon()];
        let states = nlp.rollout(&controls)?;
        Ok(Self { controls, states })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub controls: Vec<Control>,
    /// forward simulation of `controls` from the measured state
    pub states: Vec<State>,
    /// predicted `(p_y, p_z, F_n)` at every node
    pub outputs: Vec<[f64; 3]>,
    /// force bounds in force at every node
    pub force_lo: Vec<f64>,
    pub force_hi: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// largest shooting defect of the final SQP iterate
    pub defect: f64,
    pub converged: bool,
    pub feasible: bool,
    pub relaxation: Relaxation,
    pub max_slack: f64,
}

#[derive(Clone, Copy)]
enum Row {
    State(usize, usize),
    ForceLo(usize),
    ForceHi(usize),
}

struct Merit {
    phi: f64,
    defects: f64,
    violation: f64,
    objective: f64,
}

fn violation(f: f64, lo: f64, hi: f64) -> f64 {
    (lo - f).max(f - hi).max(0.0)
}

impl<M: OcpModel> Nlp<'_, M> {
    /// ℓ1 merit; state-box violations count when `state_boxes` is set.
    fn merit(&self, states: &[State], controls: &[Control], mu: f64, state_boxes: bool) -> Result<Merit> {
        let n = self.horizon();
        let (objective, forces) = self.objective_parts(states, controls)?;
        let mut defects = 0.0;
        for k in 0..n {
            let next = self.step_value(&states[k], &controls[k])?;
            defects += (0..NX).map(|i| (next[i] - states[k + 1][i]).abs()).sum::<f64>();
        }
        let mut viol = 0.0;
        for k in 1..=n {
            let s = &states[k];
            let (lo, hi) = self.force_bounds_at(&[s[0], s[1], s[2]])?;
            viol += violation(forces[k], lo, hi);
            if state_boxes {
                viol += (0..NX).map(|i| violation(s[i], self.state_lo[i], self.state_hi[i])).fold(0.0, f64::max);
            }
        }
        let phi = objective + mu * defects + self.cfg.slack_weight * viol;
        if !phi.is_finite() {
            return Err(Error::NonFinite("SQP merit function"));
        }
        Ok(Merit { phi, defects, violation: viol, objective })
    }

    fn max_defect(&self, states: &[State], controls: &[Control]) -> Result<f64> {
        let mut m = 0.0f64;
        for k in 0..self.horizon() {
            let next = self.step_value(&states[k], &controls[k])?;
            for i in 0..NX {
                m = m.max((next[i] - states[k + 1][i]).abs());
            }
        }
        Ok(m)
    }
}

struct Subproblem {
    qp: DenseQp,
    rows: Vec<Row>,
}

fn assemble<M: OcpModel>(
    nlp: &Nlp<'_, M>,
    relaxation: Relaxation,
    lin: &Linearization,
    gs: &[DMatrix<f64>],
    offs: &[SVector<f64, NX>],
    states: &[State],
    controls: &[Control],
) -> Subproblem {
    let n = nlp.horizon();
    let nc = NU * n;
    // controls, then one force slack and one state slack per node
    let nv = nc + 2 * n;
    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut g = DVector::<f64>::zeros(nv);
    let mut hc = DMatrix::<f64>::zeros(nc, nc);
    let mut gc = DVector::<f64>::zeros(nc);

    for k in 0..n {
        if k > 0 {
            let j = DMatrix::from_column_slice(4, NX, lin.j_stage[k].as_slice());
            let m = &j * &gs[k];
            let r = lin.r_stage[k] + lin.j_stage[k] * offs[k];
            hc += 2.0 * m.tr_mul(&m);
            gc += 2.0 * m.tr_mul(&DVector::from_column_slice(r.as_slice()));
        }
        for i in 0..NU {
            let w = lin.w_ctrl[i];
            hc[(NU * k + i, NU * k + i)] += 2.0 * w * w;
            gc[NU * k + i] += 2.0 * w * w * controls[k][i];
        }
    }
    for i in 0..NX {
        let w = lin.w_term[i];
        if w != 0.0 {
            let row = gs[n].row(i);
            let r = w * (states[n][i] + offs[n][i]);
            hc += 2.0 * w * w * row.tr_mul(&row);
            gc += 2.0 * w * r * row.transpose();
        }
    }
    h.view_mut((0, 0), (nc, nc)).copy_from(&hc);
    g.rows_mut(0, nc).copy_from(&gc);
    // the QP slack variables are ρ·ξ so that their bound multipliers stay
    // O(1) instead of O(ρ), which keeps the interior-point system well scaled
    let rho = nlp.cfg.slack_weight;
    for k in 0..2 * n {
        g[nc + k] = 1.0;
    }
    for i in 0..nc {
        h[(i, i)] += REG;
    }

    let mut rows = Vec::new();
    let mut a_rows: Vec<DVector<f64>> = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for k in 1..=n {
        if relaxation != Relaxation::NoStateBoxes {
            for i in 0..NX {
                let base = states[k][i] + offs[k][i];
                // rows that no step inside the input box can reach are left out
                let (mut reach_lo, mut reach_hi) = (base, base);
                for j in 0..nc {
                    let gij = gs[k][(i, j)];
                    let (a, b) = (gij * (nlp.input_lo[j % NU] - controls[j / NU][j % NU]), gij * (nlp.input_hi[j % NU] - controls[j / NU][j % NU]));
                    reach_lo += a.min(b);
                    reach_hi += a.max(b);
                }
                if reach_lo > nlp.state_lo[i] && reach_hi < nlp.state_hi[i] {
                    continue;
                }
                let mut a = DVector::zeros(nv);
                a.rows_mut(0, nc).copy_from(&gs[k].row(i).transpose());
                a[nc + n + k - 1] = 1.0 / rho;
                a_rows.push(a.clone());
                lo.push(nlp.state_lo[i] - base);
                hi.push(f64::INFINITY);
                rows.push(Row::State(k, i));
                a[nc + n + k - 1] = -1.0 / rho;
                a_rows.push(a);
                lo.push(f64::NEG_INFINITY);
                hi.push(nlp.state_hi[i] - base);
                rows.push(Row::State(k, i));
            }
        }
        let df = lin.dforce[k];
        let mut grad = DVector::zeros(nc);
        let mut f0 = lin.force[k];
        for c in 0..3 {
            grad += df[c] * gs[k].row(c).transpose();
            f0 += df[c] * offs[k][c];
        }
        let mut a = DVector::zeros(nv);
        a.rows_mut(0, nc).copy_from(&grad);
        a[nc + k - 1] = 1.0 / rho;
        a_rows.push(a.clone());
        lo.push(lin.force_lo[k] - f0);
        hi.push(f64::INFINITY);
        rows.push(Row::ForceLo(k));
        a[nc + k - 1] = -1.0 / rho;
        a_rows.push(a);
        lo.push(f64::NEG_INFINITY);
        hi.push(lin.force_hi[k] - f0);
        rows.push(Row::ForceHi(k));
    }
    let mut a = DMatrix::zeros(a_rows.len(), nv);
    for (r, row) in a_rows.iter().enumerate() {
        a.row_mut(r).copy_from(&row.transpose());
    }
    let mut lb = vec![0.0; nv];
    let mut ub = vec![f64::INFINITY; nv];
    for k in 0..n {
        for i in 0..NU {
            lb[NU * k + i] = nlp.input_lo[i] - controls[k][i];
            ub[NU * k + i] = nlp.input_hi[i] - controls[k][i];
        }
    }
    Subproblem { qp: DenseQp { h, g, a, lo, hi, lb, ub }, rows }
}

/// Largest costate magnitude from the condensed QP multipliers.
fn max_costate(nlp_n: usize, lin: &Linearization, rows: &[Row], y: &[f64], ds: &[SVector<f64, NX>], states: &[State]) -> f64 {
    let mut cy = vec![SVector::<f64, NX>::zeros(); nlp_n + 1];
    for (row, yv) in rows.iter().zip(y) {
        match *row {
            Row::State(k, i) => cy[k][i] += yv,
            Row::ForceLo(k) | Row::ForceHi(k) => {
                for c in 0..3 {
                    cy[k][c] += lin.dforce[k][c] * yv;
                }
            }
        }
    }
    let n = nlp_n;
    let grad_q = |k: usize| -> SVector<f64, NX> {
        if k == n {
            SVector::from_fn(|i, _| {
                let w = lin.w_term[i];
                2.0 * w * w * (states[n][i] + ds[n][i])
            })
        } else {
            let r = lin.r_stage[k] + lin.j_stage[k] * ds[k];
            2.0 * lin.j_stage[k].transpose() * r
        }
    };
    let mut lambda = grad_q(n) - cy[n];
    let mut best = lambda.amax();
    for k in (1..n).rev() {
        lambda = grad_q(k) - cy[k] + lin.a[k].transpose() * lambda;
        best = best.max(lambda.amax());
    }
    best
}

/// Solves the NLP from `warm`, dropping the state boxes if the QP
/// subproblem fails with them.
pub fn solve_sqp<M: OcpModel>(nlp: &Nlp<'_, M>, warm: &WarmStart) -> Result<OcpSolution> {
    match solve_at(nlp, warm, nlp.relaxation) {
        Ok(s) => Ok(s),
        Err(Error::QpFailed(msg)) if nlp.relaxation != Relaxation::NoStateBoxes => {
            log::debug!("QP subproblem failed ({msg}); retrying without state boxes");
            solve_at(nlp, warm, Relaxation::NoStateBoxes).map_err(|e| match e {
                Error::QpFailed(m) => Error::InfeasibleOcp(format!("QP failed without state boxes: {m}")),
                other => other,
            })
        }
        Err(Error::QpFailed(m)) => Err(Error::InfeasibleOcp(m)),
        Err(e) => Err(e),
    }
}

fn solve_at<M: OcpModel>(nlp: &Nlp<'_, M>, warm: &WarmStart, relaxation: Relaxation) -> Result<OcpSolution> {
    let n = nlp.horizon();
    if warm.controls.len() != n || warm.states.len() != n + 1 {
        return Err(Error::InvalidArgument(format!(
            "warm start has {} controls and {} states for horizon {n}",
            warm.controls.len(),
            warm.states.len()
        )));
    }
    let mut controls: Vec<Control> = warm
        .controls
        .iter()
        .map(|c| std::array::from_fn(|i| c[i].clamp(nlp.input_lo[i], nlp.input_hi[i])))
        .collect();
    let mut states = warm.states.clone();
    states[0] = nlp.x0;
    let rho = nlp.cfg.slack_weight;
    let soft_states = relaxation != Relaxation::NoStateBoxes;
    let qp_opts = QpOptions::default();
    let mut mu = 0.0f64;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut converged = false;
    let mut max_slack = 0.0f64;

    while iterations < nlp.cfg.max_sqp_iter {
        iterations += 1;
        let lin = nlp.linearize(&states, &controls)?;
        let (gs, offs) = condense(&lin);
        let sub = assemble(nlp, relaxation, &lin, &gs, &offs, &states, &controls);
        let sol = solve_qp(&sub.qp, &qp_opts)?;
        let nc = NU * n;
        let dc = sol.x.rows(0, nc).clone_owned();
        let slack: f64 = sol.x.rows(nc, 2 * n).iter().map(|v| v.max(0.0) / rho).sum();
        max_slack = sol.x.rows(nc, 2 * n).iter().fold(0.0, |m: f64, v| m.max(*v / rho));
        let ds: Vec<SVector<f64, NX>> = (0..=n).map(|k| SVector::from_iterator((&gs[k] * &dc).iter().copied()) + offs[k]).collect();

        mu = mu.max(1.1 * max_costate(n, &lin, &sub.rows, &sol.y_rows, &ds, &states));

        // directional derivative of the merit along the step
        let mut dir = 0.0;
        for k in 0..n {
            dir += 2.0 * lin.r_stage[k].dot(&(lin.j_stage[k] * ds[k]));
            for i in 0..NU {
                let w = lin.w_ctrl[i];
                dir += 2.0 * w * w * controls[k][i] * dc[NU * k + i];
            }
        }
        for i in 0..NX {
            let w = lin.w_term[i];
            dir += 2.0 * w * w * states[n][i] * ds[n][i];
        }
        let m0 = nlp.merit(&states, &controls, mu, soft_states)?;
        dir += -mu * m0.defects + rho * (slack - m0.violation);
        let dir = dir.min(0.0);

        let trial = |alpha: f64| -> (Vec<State>, Vec<Control>) {
            let s = (0..=n)
                .map(|k| if k == 0 { states[0] } else { std::array::from_fn(|i| states[k][i] + alpha * ds[k][i]) })
                .collect();
            let c = (0..n).map(|k| std::array::from_fn(|i| controls[k][i] + alpha * dc[NU * k + i])).collect();
            (s, c)
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let (s, c) = trial(alpha);
            match nlp.merit(&s, &c, mu, soft_states) {
                // the small absolute slack absorbs rounding when the step vanishes
                Ok(m) if m.phi <= m0.phi + ARMIJO * alpha * dir + 1e-14 * (1.0 + m0.phi.abs()) => {
                    accepted = Some((s, c));
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((s, c)) = accepted else {
            log::debug!("SQP line search failed at iteration {iterations}");
            break;
        };
        let step = ds.iter().map(|v| v.amax()).chain(dc.iter().map(|v| v.abs())).fold(0.0, f64::max);
        states = s;
        controls = c;
        kkt = (alpha * step).max(nlp.max_defect(&states, &controls)?);
        if kkt < nlp.cfg.kkt_tol {
            // a lagging pointwise back-off may leave a small violation the
            // QP considered satisfiable; keep iterating in that case
            let m = nlp.merit(&states, &controls, 0.0, soft_states)?;
            if m.violation <= FEAS_TOL || max_slack > FEAS_TOL {
                converged = true;
                break;
            }
        }
    }
    let defect = nlp.max_defect(&states, &controls)?;
    finish(nlp, controls, iterations, kkt, defect, converged, relaxation, max_slack)
}

#[allow(clippy::too_many_arguments)]
fn finish<M: OcpModel>(
    nlp: &Nlp<'_, M>,
    controls: Vec<Control>,
    iterations: usize,
    kkt_residual: f64,
    defect: f64,
    converged: bool,
    relaxation: Relaxation,
    max_slack: f64,
) -> Result<OcpSolution> {
    let n = nlp.horizon();
    let states = nlp.rollout(&controls)?;
    let m = nlp.merit(&states, &controls, 0.0, false)?;
    let mut outputs = Vec::with_capacity(n + 1);
    let mut force_lo = Vec::with_capacity(n + 1);
    let mut force_hi = Vec::with_capacity(n + 1);
    let mut feasible = relaxation == Relaxation::Exact && nlp.relaxation == Relaxation::Exact;
    for (k, s) in states.iter().enumerate() {
        let q = [s[0], s[1], s[2]];
        let (y, _) = nlp.model.outputs(&q);
        let (lo, hi) = nlp.force_bounds_at(&q)?;
        if k > 0 {
            feasible &= violation(y[2], lo, hi) <= FEAS_TOL;
            feasible &= (0..NX).all(|i| s[i] >= nlp.state_lo[i] - FEAS_TOL && s[i] <= nlp.state_hi[i] + FEAS_TOL);
        }
        outputs.push(y);
        force_lo.push(lo);
        force_hi.push(hi);
    }
    Ok(OcpSolution {
        controls,
        states,
        outputs,
        force_lo,
        force_hi,
        objective: m.objective,
        iterations,
        kkt_residual,
        defect,
        converged,
        feasible,
        relaxation,
        max_slack,
    })
}
