use serde::{Deserialize, Serialize};

use super::log::TrajectoryLog;
use crate::error::{Error, Result};
use crate::ocp::ConstraintSet;

/// Summary of one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    /// RMS of reference minus true force [N]
    pub force_rmse: f64,
    /// RMS of the y–z position error [m]
    pub position_rmse: f64,
    pub min_true_force: f64,
    pub max_true_force: f64,
    /// smallest true force from the first touch on [N]
    pub min_force_after_touch: f64,
    /// share of samples out of contact or with the true force outside the force box
    pub violation_fraction: f64,
    /// samples out of contact after the first touch
    pub contact_loss_samples: usize,
    pub max_consecutive_loss: usize,
    pub theta_monotone: bool,
    pub theta_in_range: bool,
    pub theta_end: f64,
    /// `‖e_pf‖` at the first sample
    pub epf_initial: f64,
    /// RMS of `‖e_pf‖` over the final 20% of samples
    pub epf_final_rms: f64,
    /// every sample after the first feasible one was feasible
    pub feasible_after_first: bool,
    pub held_steps: usize,
    /// states, virtual states and inputs inside their boxes at every sample
    pub boxes_satisfied: bool,
    pub mean_solver_time: f64,
    pub p99_solver_time: f64,
    pub max_solver_time: f64,
}

const BOX_TOL: f64 = 1e-9;

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x * x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo - BOX_TOL && x <= hi + BOX_TOL
}

/// Nearest-rank percentile of `v` (`p` in percent).
pub fn percentile(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

pub fn compute_metrics(log: &TrajectoryLog, c: &ConstraintSet) -> Result<Metrics> {
    let rows = &log.rows;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("metrics need a nonempty log".into()));
    }
    let n = rows.len();
    let violated = |r: &super::log::LogRow| !r.in_contact || r.f_true < c.force_lo || r.f_true > c.force_hi;
    let mut loss = 0;
    let mut run = 0;
    let mut max_run = 0;
    let first_touch = rows.iter().position(|r| r.in_contact).unwrap_or(n);
    for r in &rows[first_touch..] {
        if r.in_contact {
            run = 0;
        } else {
            loss += 1;
            run += 1;
            max_run = max_run.max(run);
        }
    }
    let first_feasible = rows.iter().position(|r| r.feasible);
    let feasible_after_first = first_feasible.is_some_and(|i| rows[i..].iter().all(|r| r.feasible));
    let boxes_satisfied = rows.iter().all(|r| {
        let q = [r.q1, r.q2, r.q3];
        let qd = [r.qd1, r.qd2, r.qd3];
        let u = [r.u1, r.u2, r.u3];
        (0..3).all(|i| within(q[i], c.q_lo[i], c.q_hi[i]) && within(qd[i], c.qd_lo[i], c.qd_hi[i]) && within(u[i], c.u_lo[i], c.u_hi[i]))
            && within(r.z1, c.z_lo[0], c.z_hi[0])
            && within(r.z2, c.z_lo[1], c.z_hi[1])
            && within(r.v, c.v_lo, c.v_hi)
    });
    let tail = n - (n as f64 * 0.2).ceil() as usize;
    let times: Vec<f64> = log.timing.iter().map(|t| t.wall_time).collect();
    Ok(Metrics {
        samples: n,
        force_rmse: rms(rows.iter().map(|r| r.e_f)),
        position_rmse: rms(rows.iter().map(|r| (r.e_y * r.e_y + r.e_z * r.e_z).sqrt())),
        min_true_force: rows.iter().map(|r| r.f_true).fold(f64::INFINITY, f64::min),
        max_true_force: rows.iter().map(|r| r.f_true).fold(f64::NEG_INFINITY, f64::max),
        min_force_after_touch: rows[first_touch.min(n - 1)..].iter().map(|r| r.f_true).fold(f64::INFINITY, f64::min),
        violation_fraction: rows.iter().filter(|r| violated(r)).count() as f64 / n as f64,
        contact_loss_samples: loss,
        max_consecutive_loss: max_run,
        theta_monotone: rows.windows(2).all(|w| w[1].z1 >= w[0].z1),
        theta_in_range: rows.iter().all(|r| (-1.0 - BOX_TOL..=BOX_TOL).contains(&r.z1)),
        theta_end: rows[n - 1].z1,
        epf_initial: rows[0].epf_norm(),
        epf_final_rms: rms(rows[tail..].iter().map(|r| r.epf_norm())),
        feasible_after_first,
        held_steps: rows.iter().filter(|r| r.held).count(),
        boxes_satisfied,
        mean_solver_time: if times.is_empty() { f64::NAN } else { times.iter().sum::<f64>() / times.len() as f64 },
        p99_solver_time: percentile(&times, 99.0),
        max_solver_time: times.iter().copied().fold(f64::NAN, f64::max),
    })
}

impl Metrics {
    /// Flat `key = value` record.
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `100·(1 − b/a)`: how much smaller `b` is than `a`, in percent.
pub fn reduction_percent(a: f64, b: f64) -> f64 {
    100.0 * (1.0 - b / a)
}
