//! Closed-loop simulation: the plant with its true contact, the sampled
//! controller, data collection for identification, and run metrics.
//!
//! The plant is integrated with RK4 at `sim.plant_dt` under zero-order-hold
//! inputs; the controller runs every `ocp.dt` on the full measured state.

mod log;
mod metrics;
mod scenario;
mod truth;

pub use log::{LogRow, TimingRow, TrajectoryLog};
pub use metrics::{compute_metrics, percentile, reduction_percent, Metrics};
pub use scenario::{
    ControllerSection, DataSection, DisturbanceSpec, ModelKind, OutputSection, Scenario, Seeds, SimSection, TruthMode, TruthSection,
};
pub use truth::{AnalyticTruth, GpTruth, GroundTruthForce};

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contact::{fit_hertz, fit_hook, fit_hybrid, penetration_depth, ContactSample, ForceModel, HookModel, HybridFitOptions, ModelBundle};
use crate::dynamics::{forward_kinematics, integrate_rk4, inverse_kinematics, JointState, JointTorque, StateBox};
use crate::error::{Error, Result};
use crate::gp::FitOptions;
use crate::ocp::{default_sigma_region, sigma_max_over_region, Controller, OcpModel, RobotModel, TighteningMode};
use crate::par::{self, Exec};
use crate::pathref::{eval_path, virtual_step, PathDefinition, VirtualState};

/// A finished or aborted run. On abort `log` holds the samples up to the
/// failure and `error` says why.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub log: TrajectoryLog,
    pub error: Option<String>,
}

/// Arm state on the path start with the true force equal to
/// `sim.start_force`.
pub fn initial_state(s: &Scenario, truth: &GroundTruthForce) -> Result<(JointState, VirtualState)> {
    let r = eval_path(&s.path, s.sim.theta0);
    let delta = if s.sim.start_force > 0.0 {
        truth.penetration_for(s.sim.start_force, r[0], r[1])?
    } else {
        // just touching
        truth.contact_offset(r[0])
    };
    let n = s.surface.normal;
    if n[0].abs() < 0.1 {
        return Err(Error::Config("the surface normal needs an x component to place the start pose".into()));
    }
    let p0 = s.surface.p0;
    let rest = (r[0] - p0 * n[1].abs()) * n[1] + (r[1] - p0 * n[2].abs()) * n[2];
    let x = p0 * n[0].abs() + (delta - rest) / n[0];
    let q = inverse_kinematics(&[x, r[0], r[1]], &s.sim.ik_guess, &s.robot)?;
    Ok((JointState::at_rest(q), VirtualState { z1: s.sim.theta0, z2: 0.0 }))
}

fn sanity_box(s: &Scenario) -> StateBox {
    let c = &s.controller.constraints;
    let f = s.sim.sanity_angle_factor;
    let v = s.sim.max_speed;
    StateBox {
        lo: [c.q_lo[0] * f, c.q_lo[1] * f, c.q_lo[2] * f, -v, -v, -v],
        hi: [c.q_hi[0] * f, c.q_hi[1] * f, c.q_hi[2] * f, v, v, v],
    }
}

/// σ_max over the default region for worst-case tightening; `None` for
/// models without uncertainty or other modes.
pub fn sigma_max_for(s: &Scenario, model: &ForceModel) -> Result<Option<f64>> {
    if s.tightening.mode != TighteningMode::WorstCase {
        return Ok(None);
    }
    Ok(Some(match model {
        ForceModel::Hybrid(h) => {
            let grid = default_sigma_region(&h.gp, s.tightening.region_inflation, s.tightening.region_points);
            sigma_max_over_region(&h.gp, &grid, Exec::Parallel)?
        }
        _ => 0.0,
    }))
}

/// Runs the scenario with `model` inside the controller and `truth` in
/// the plant.
pub fn run_closed_loop(s: &Scenario, model: &ForceModel, truth: &GroundTruthForce) -> Result<RunOutcome> {
    s.validate()?;
    let c = &s.controller;
    let robot = RobotModel::new(s.robot.clone(), s.surface, model.clone());
    let sigma_max = sigma_max_for(s, model)?;
    let mut ctl = Controller::new(robot, s.path.clone(), c.ocp.clone(), c.constraints, s.tightening, sigma_max)?;
    let (mut x, mut z) = initial_state(s, truth)?;
    let dt = c.ocp.dt;
    let sub = s.substeps();
    let h = s.sim.plant_dt;
    let sanity = sanity_box(s);
    let n = s.samples(s.sim.duration);
    let mut log = TrajectoryLog { rows: Vec::with_capacity(n), timing: Vec::with_capacity(n) };
    let force_law = |p: &crate::dynamics::Pose| {
        let f = truth.force_at_pose(p, &s.surface);
        let nrm = s.surface.normal;
        [f * nrm[0], f * nrm[1], f * nrm[2]]
    };

    for k in 0..n {
        let t = k as f64 * dt;
        let out = ctl.step_or_hold(&x, &z);
        let d = &out.diagnostics;
        let (y, _) = ctl.model.outputs(&x.q);
        let sigma = ctl.model.force_std(&x.q)?;
        let (f_lo, f_hi) = match ctl.last_solution() {
            Some(sol) if !d.held => (sol.force_lo[0], sol.force_hi[0]),
            _ => (c.constraints.force_lo, c.constraints.force_hi),
        };
        let pose = forward_kinematics(&x.q, &s.robot);
        let r = eval_path(&s.path, z.z1);
        let f_true = truth.force_at_pose(&pose, &s.surface);
        let dist = s.disturbance.map(|ds| ds.torque_at(t)[ds.joint - 1]).unwrap_or(0.0);
        log.rows.push(LogRow {
            t,
            q1: x.q[0],
            q2: x.q[1],
            q3: x.q[2],
            qd1: x.qd[0],
            qd2: x.qd[1],
            qd3: x.qd[2],
            u1: out.torque[0],
            u2: out.torque[1],
            u3: out.torque[2],
            v: out.v,
            z1: z.z1,
            z2: z.z2,
            py: pose.p[1],
            pz: pose.p[2],
            ref_y: r[0],
            ref_z: r[1],
            ref_f: r[2],
            f_true,
            f_pred: y[2],
            sigma,
            f_lo,
            f_hi,
            e_y: r[0] - pose.p[1],
            e_z: r[1] - pose.p[2],
            e_f: r[2] - f_true,
            in_contact: truth.in_contact(&x.q, &s.robot, &s.surface),
            disturbance: dist,
            feasible: d.feasible,
            converged: d.converged,
            held: d.held,
            relaxation: format!("{:?}", d.relaxation).to_lowercase(),
            iterations: d.iterations,
            kkt: d.kkt_residual,
            objective: d.objective,
            max_slack: d.max_slack,
        });
        log.timing.push(TimingRow { t, wall_time: d.wall_time, iterations: d.iterations });

        for j in 0..sub {
            let tj = t + j as f64 * h;
            let dv = s.disturbance.map(|ds| ds.torque_at(tj)).unwrap_or([0.0; 3]);
            let u = JointTorque([out.torque[0] + dv[0], out.torque[1] + dv[1], out.torque[2] + dv[2]]);
            x = match integrate_rk4(&x, &u, force_law, &s.robot, h, 1, Some(&sanity)) {
                Ok(next) => next,
                Err(e) => {
                    let msg = match e {
                        Error::IntegrationDiverged { .. } => Error::IntegrationDiverged { t: tj + h }.to_string(),
                        other => other.to_string(),
                    };
                    return Ok(RunOutcome { log, error: Some(msg) });
                }
            };
        }
        z = virtual_step(&z, out.v, dt);
    }
    Ok(RunOutcome { log, error: None })
}

/// Runs independent scenarios, in parallel when `exec` allows. Results
/// keep the input order.
pub fn run_batch(jobs: &[(Scenario, ForceModel)], truth: &GroundTruthForce, exec: Exec) -> Vec<Result<RunOutcome>> {
    par::map(exec, jobs, |(s, m)| run_closed_loop(s, m, truth))
}

/// Reference perturbed by random offsets, kept strictly inside the
/// force box.
pub fn jitter_path<R: Rng>(path: &PathDefinition, rng: &mut R, pos_sd: f64, force_sd: f64, force_box: (f64, f64)) -> PathDefinition {
    let mut g = |sd: f64| -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        sd * n
    };
    let margin = 0.2;
    match path {
        PathDefinition::Sinusoid(p) => {
            let mut p = p.clone();
            p.y_start += g(pos_sd);
            p.z_center += g(pos_sd);
            p.z_amplitude = (p.z_amplitude + g(pos_sd)).abs();
            p.force_amplitude = (p.force_amplitude + g(0.5 * force_sd)).abs();
            let half = 0.5 * (force_box.1 - force_box.0) - margin;
            p.force_amplitude = p.force_amplitude.min(half);
            let lo = force_box.0 + margin + p.force_amplitude;
            let hi = force_box.1 - margin - p.force_amplitude;
            p.force_mean = (p.force_mean + g(force_sd)).clamp(lo, hi);
            PathDefinition::Sinusoid(p)
        }
        PathDefinition::Table(t) => {
            let mut t = t.clone();
            let (dy, dz, df) = (g(pos_sd), g(pos_sd), g(force_sd));
            t.py.iter_mut().for_each(|v| *v += dy);
            t.pz.iter_mut().for_each(|v| *v += dz);
            t.force.iter_mut().for_each(|v| *v = (*v + df).clamp(force_box.0 + margin, force_box.1 - margin));
            PathDefinition::Table(t)
        }
    }
}

/// Identification corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: Vec<ContactSample>,
    pub eval: Vec<ContactSample>,
}

fn run_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Collects `(q, δ, F̂)` from closed-loop runs of a spring-model controller
/// along jittered references. The first `data.runs` runs form the
/// training set, the next `data.eval_runs` the evaluation set.
pub fn generate_training_data(s: &Scenario, truth: &GroundTruthForce, exec: Exec) -> Result<TrainingData> {
    s.validate()?;
    let d = s.data;
    let total = d.runs + d.eval_runs;
    let boot = ForceModel::Hook(HookModel { k_e: d.bootstrap_k_e });
    let c = &s.controller.constraints;
    let runs = par::map_range(exec, total, |i| -> Result<Vec<ContactSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(s.seeds.data, i));
        let mut sc = s.clone();
        sc.path = jitter_path(&s.path, &mut rng, d.position_jitter, d.force_jitter, (c.force_lo, c.force_hi));
        sc.sim.duration = d.duration;
        sc.disturbance = None;
        sc.tightening = Default::default();
        sc.controller.ocp.max_sqp_iter = d.bootstrap_sqp_iter;
        let out = run_closed_loop(&sc, &boot, truth)?;
        if let Some(e) = out.error {
            return Err(Error::InfeasibleOcp(format!("data-collection run {i} aborted: {e}")));
        }
        let noise = Normal::new(0.0, d.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        Ok(out
            .log
            .rows
            .iter()
            .map(|r| {
                let q = [r.q1, r.q2, r.q3];
                let delta = penetration_depth(&forward_kinematics(&q, &s.robot), &s.surface);
                ContactSample { q, delta, force: r.f_true + noise.sample(&mut rng) }
            })
            .collect())
    });
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, r) in runs.into_iter().enumerate() {
        let samples = r?;
        if i < d.runs {
            train.extend(samples);
        } else {
            eval.extend(samples);
        }
    }
    Ok(TrainingData { train, eval })
}

/// Identifies one output model from `samples`.
pub fn fit_model(kind: ModelKind, samples: &[ContactSample], s: &Scenario, exec: Exec) -> Result<ForceModel> {
    Ok(match kind {
        ModelKind::Hook => ForceModel::Hook(fit_hook(samples)?),
        ModelKind::Hertz => ForceModel::Hertz(fit_hertz(samples, s.data.hertz_alpha_lock)?),
        ModelKind::Hybrid => {
            let opts = HybridFitOptions {
                min_dist: s.data.min_dist,
                gp: FitOptions { restarts: s.data.gp_restarts, seed: s.seeds.fit, exec, ..FitOptions::default() },
            };
            ForceModel::Hybrid(fit_hybrid(samples, &s.robot, &s.surface, &opts)?)
        }
    })
}

/// Controller model named by the scenario, read from its bundle file.
pub fn load_controller_model(s: &Scenario) -> Result<ForceModel> {
    let path = s
        .controller
        .model_file
        .as_ref()
        .ok_or_else(|| Error::Config("controller.model_file is required to simulate".into()))?;
    let model = read_model(path)?;
    if model.name() != s.controller.model.name() {
        return Err(Error::Config(format!(
            "controller.model is `{}` but {} holds a `{}` model",
            s.controller.model.name(),
            path.display(),
            model.name()
        )));
    }
    Ok(model)
}

pub fn read_model(path: &Path) -> Result<ForceModel> {
    let bundle: ModelBundle = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
    bundle.into_model()
}

pub fn write_model(model: &ForceModel, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, &ModelBundle::from(model))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    q1: f64,
    q2: f64,
    q3: f64,
    delta: f64,
    force: f64,
}

pub fn write_samples<W: Write>(samples: &[ContactSample], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for s in samples {
        wr.serialize(SampleRow { q1: s.q[0], q2: s.q[1], q3: s.q[2], delta: s.delta, force: s.force })?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(r: R) -> Result<Vec<ContactSample>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize::<SampleRow>()
        .enumerate()
        .map(|(i, rec)| {
            let r = rec.map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?;
            Ok(ContactSample { q: [r.q1, r.q2, r.q3], delta: r.delta, force: r.force })
        })
        .collect()
}
