use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use forcempc::contact::{rmse, ForceModel};
use forcempc::ocp::ConstraintSet;
use forcempc::par::{self, Exec};
use forcempc::simloop::{
    compute_metrics, fit_model, generate_training_data, read_model, read_samples, reduction_percent, run_closed_loop, write_model,
    write_samples, Metrics, ModelKind, RunOutcome, Scenario, TrajectoryLog,
};
use forcempc::Error;

use crate::plot::{render, render_grid, Band, Chart, Series, PALETTE};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// bad arguments, configuration or input files (exit 1)
    Usage(String),
    /// solver, integration or output failure (exit 2)
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) | Error::EmptyTightenedSet { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;

pub struct Ctx {
    pub scenario: Scenario,
    pub out_dir: PathBuf,
    pub quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out(&self) -> Res<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", self.out_dir.display())))
    }
}

fn open(path: &Path) -> Res<File> {
    File::open(path).map_err(|e| Failure::Usage(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Errors tied to an input file keep its name in the message.
fn in_file(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
        Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
    }
}

pub fn gen_data(ctx: &Ctx) -> Res<()> {
    let s = &ctx.scenario;
    let truth = s.truth.build()?;
    ctx.say(format!("collecting {} + {} runs of {} s", s.data.runs, s.data.eval_runs, s.data.duration));
    let data = generate_training_data(s, &truth, Exec::Parallel)?;
    ctx.ensure_out()?;
    for (name, rows) in [("train.csv", &data.train), ("eval.csv", &data.eval)] {
        let path = ctx.out(name);
        write_samples(rows, create(&path)?)?;
        println!("{}: {} rows -> {}", name.trim_end_matches(".csv"), rows.len(), path.display());
    }
    Ok(())
}

pub struct FitArgs {
    pub models: Vec<ModelKind>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub hertz_alpha: Option<f64>,
}

fn describe(m: &ForceModel) -> String {
    match m {
        ForceModel::Hook(h) => format!("k_e = {}", h.k_e),
        ForceModel::Hertz(h) => format!("k_e = {}, alpha = {}", h.k_e, h.alpha),
        ForceModel::Hybrid(h) => format!(
            "k_e = {}, {} GP points, signal_var = {:.4}, lengthscales = [{}], noise_var = {:.3e}",
            h.hook.k_e,
            h.gp.len(),
            h.gp.kernel.signal_var,
            h.gp.kernel.lengthscales.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(", "),
            h.gp.noise_var
        ),
    }
}

pub fn fit(ctx: &Ctx, args: &FitArgs) -> Res<()> {
    let mut s = ctx.scenario.clone();
    if let Some(a) = args.hertz_alpha {
        if !(a > 0.0) {
            return Err(Failure::Usage(format!("--hertz-alpha must be positive, got {a}")));
        }
        s.data.hertz_alpha_lock = Some(a);
    }
    let train_path = args.train.clone().unwrap_or_else(|| ctx.out("train.csv"));
    let train = read_samples(open(&train_path)?).map_err(in_file(&train_path))?;
    let eval_path = args.eval.clone().or_else(|| Some(ctx.out("eval.csv")).filter(|p| p.exists()));
    let eval = match &eval_path {
        Some(p) => Some(read_samples(open(p)?).map_err(in_file(p))?),
        None => None,
    };
    ctx.ensure_out()?;
    let mut report = String::from("model,rmse_train,rmse_eval,parameters\n");
    let mut hook_rmse = None;
    for kind in &args.models {
        let m = fit_model(*kind, &train, &s, Exec::Parallel)?;
        let r_train = rmse(&m, &train, &s.robot, &s.surface)?;
        let r_eval = match &eval {
            Some(e) => rmse(&m, e, &s.robot, &s.surface)?,
            None => f64::NAN,
        };
        let path = ctx.out(&format!("model_{}.json", kind.name()));
        write_model(&m, &path)?;
        let headline = if r_eval.is_nan() { r_train } else { r_eval };
        let vs_hook = match (kind, hook_rmse) {
            (ModelKind::Hook, _) => {
                hook_rmse = Some(headline);
                String::new()
            }
            (_, Some(h)) => format!(" ({:.1}% below hook)", reduction_percent(h, headline)),
            _ => String::new(),
        };
        println!("{:<6} rmse train {r_train:.4} N, eval {r_eval:.4} N{vs_hook}; {}", kind.name(), describe(&m));
        ctx.say(format!("       -> {}", path.display()));
        report.push_str(&format!("{},{r_train},{r_eval},\"{}\"\n", kind.name(), describe(&m)));
    }
    write_text(&ctx.out("fit_report.csv"), &report)
}

/// Model bundle for `kind`: explicit path, then the scenario's file, then
/// `<out>/model_<kind>.json`.
fn resolve_model(s: &Scenario, kind: ModelKind, explicit: Option<&Path>, out_dir: &Path) -> Res<ForceModel> {
    let path = match (explicit, &s.controller.model_file) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) if s.controller.model == kind => p.clone(),
        _ => out_dir.join(format!("model_{}.json", kind.name())),
    };
    if !path.exists() {
        return Err(Failure::Usage(format!(
            "no fitted {} model at {}; run `forcempc fit` first or set controller.model_file",
            kind.name(),
            path.display()
        )));
    }
    let m = read_model(&path).map_err(in_file(&path))?;
    if m.name() != kind.name() {
        return Err(Failure::Usage(format!("{} holds a `{}` model, expected `{}`", path.display(), m.name(), kind.name())));
    }
    Ok(m)
}

fn column(log: &TrajectoryLog, f: impl Fn(&forcempc::simloop::LogRow) -> f64) -> Vec<(f64, f64)> {
    log.rows.iter().map(|r| (r.t, f(r))).collect()
}

fn const_band(label: &str, log: &TrajectoryLog, lo: f64, hi: f64, color: &'static str) -> Band {
    let n = log.rows.len();
    Band { label: label.into(), x: log.rows.iter().map(|r| r.t).collect(), lo: vec![lo; n], hi: vec![hi; n], color }
}

fn force_chart(title: &str, log: &TrajectoryLog, c: &ConstraintSet) -> Chart {
    let mut bands = vec![const_band("force box", log, c.force_lo, c.force_hi, PALETTE[2])];
    if log.rows.iter().any(|r| r.f_lo != c.force_lo || r.f_hi != c.force_hi) {
        bands.push(Band {
            label: "tightened box".into(),
            x: log.rows.iter().map(|r| r.t).collect(),
            lo: log.rows.iter().map(|r| r.f_lo).collect(),
            hi: log.rows.iter().map(|r| r.f_hi).collect(),
            color: PALETTE[3],
        });
    }
    Chart {
        title: title.into(),
        x_label: "t [s]".into(),
        y_label: "force [N]".into(),
        series: vec![
            Series::new("reference", column(log, |r| r.ref_f), PALETTE[5]).dashed(),
            Series::new("true", column(log, |r| r.f_true), PALETTE[0]),
            Series::new("predicted", column(log, |r| r.f_pred), PALETTE[1]).dashed(),
        ],
        bands,
        equal_aspect: false,
    }
}

/// The four run plots, keyed by file suffix.
fn run_plots(log: &TrajectoryLog, c: &ConstraintSet) -> Vec<(&'static str, String)> {
    let position = Chart {
        title: "end effector in the y-z plane".into(),
        x_label: "y [m]".into(),
        y_label: "z [m]".into(),
        series: vec![
            Series::new("reference", log.rows.iter().map(|r| (r.ref_y, r.ref_z)).collect(), PALETTE[5]).dashed(),
            Series::new("actual", log.rows.iter().map(|r| (r.py, r.pz)).collect(), PALETTE[0]),
        ],
        bands: vec![],
        equal_aspect: true,
    };
    let theta = Chart {
        title: "path parameter".into(),
        x_label: "t [s]".into(),
        y_label: "theta".into(),
        series: vec![Series::new("theta", column(log, |r| r.z1), PALETTE[0])],
        bands: vec![const_band("bounds", log, c.z_lo[0], c.z_hi[0], PALETTE[2])],
        equal_aspect: false,
    };
    let theta_dot = Chart {
        title: "path speed".into(),
        x_label: "t [s]".into(),
        y_label: "theta dot [1/s]".into(),
        series: vec![Series::new("theta dot", column(log, |r| r.z2), PALETTE[0])],
        bands: vec![const_band("bounds", log, c.z_lo[1], c.z_hi[1], PALETTE[2])],
        equal_aspect: false,
    };
    let qd: [fn(&forcempc::simloop::LogRow) -> f64; 3] = [|r| r.qd1, |r| r.qd2, |r| r.qd3];
    let joints: Vec<Chart> = (0..3)
        .map(|i| Chart {
            title: format!("joint {} velocity", i + 1),
            x_label: "t [s]".into(),
            y_label: "[rad/s]".into(),
            series: vec![Series::new("measured", column(log, qd[i]), PALETTE[0])],
            bands: vec![const_band("box", log, c.qd_lo[i], c.qd_hi[i], PALETTE[2])],
            equal_aspect: false,
        })
        .collect();
    vec![
        ("position", render(&position)),
        ("theta", render_grid(&[theta, theta_dot], 1)),
        ("force", render(&force_chart("contact force", log, c))),
        ("joints", render_grid(&joints, 1)),
    ]
}

fn write_plots(ctx: &Ctx, name: &str, log: &TrajectoryLog, c: &ConstraintSet) -> Res<()> {
    for (suffix, svg) in run_plots(log, c) {
        write_text(&ctx.out(&format!("{name}_{suffix}.svg")), &svg)?;
    }
    Ok(())
}

fn write_run(ctx: &Ctx, name: &str, s: &Scenario, out: &RunOutcome) -> Res<Metrics> {
    let c = &s.controller.constraints;
    let traj = ctx.out(&format!("{name}_trajectory.csv"));
    out.log.write_csv(create(&traj)?)?;
    out.log.write_timing_csv(create(&ctx.out(&format!("{name}_timing.csv")))?)?;
    if out.log.rows.is_empty() {
        return Err(Failure::Runtime(format!("{name}: run produced no samples")));
    }
    let m = compute_metrics(&out.log, c)?;
    write_text(&ctx.out(&format!("{name}_metrics.txt")), &m.to_text()?)?;
    write_plots(ctx, name, &out.log, c)?;
    ctx.say(format!("{name}: {} samples -> {}", out.log.rows.len(), traj.display()));
    Ok(m)
}

fn summary_line(name: &str, m: &Metrics) -> String {
    format!(
        "{name:<14} force rmse {:.4} N, position rmse {:.2e} m, force range [{:.3}, {:.3}] N, violations {:.1}%, contact loss {}, theta end {:.4}, solve mean {:.1} ms / p99 {:.1} ms",
        m.force_rmse,
        m.position_rmse,
        m.min_true_force,
        m.max_true_force,
        100.0 * m.violation_fraction,
        m.contact_loss_samples,
        m.theta_end,
        1e3 * m.mean_solver_time,
        1e3 * m.p99_solver_time
    )
}

pub struct SimArgs {
    pub model: Option<ModelKind>,
    pub model_file: Option<PathBuf>,
    pub compare: Option<Vec<ModelKind>>,
    pub batch: Vec<PathBuf>,
    pub name: String,
}

pub fn simulate(ctx: &Ctx, args: &SimArgs) -> Res<()> {
    ctx.ensure_out()?;
    if !args.batch.is_empty() {
        return simulate_batch(ctx, args);
    }
    let base = &ctx.scenario;
    let truth = base.truth.build()?;
    if let Some(kinds) = &args.compare {
        let mut charts = Vec::new();
        let mut rows = Vec::new();
        let mut failed = None;
        for kind in kinds {
            let mut s = base.clone();
            s.controller.model = *kind;
            let model = resolve_model(&s, *kind, None, &ctx.out_dir)?;
            ctx.say(format!("simulating with the {} model", kind.name()));
            let out = run_closed_loop(&s, &model, &truth)?;
            let name = format!("{}_{}", args.name, kind.name());
            let m = write_run(ctx, &name, &s, &out)?;
            if let Some(e) = &out.error {
                failed.get_or_insert(format!("{name}: {e}"));
            }
            charts.push(force_chart(&format!("{} model", kind.name()), &out.log, &s.controller.constraints));
            rows.push((kind.name(), m));
        }
        let path = ctx.out(&format!("{}_compare_force.svg", args.name));
        write_text(&path, &render_grid(&charts, charts.len()))?;
        for (name, m) in &rows {
            println!("{}", summary_line(name, m));
        }
        print_reductions(rows.iter().map(|(n, m)| (n.to_string(), m)));
        ctx.say(format!("comparison plot -> {}", path.display()));
        return failed.map_or(Ok(()), |e| Err(Failure::Runtime(format!("run aborted: {e}"))));
    }
    let kind = args.model.unwrap_or(base.controller.model);
    let mut s = base.clone();
    s.controller.model = kind;
    let model = resolve_model(&s, kind, args.model_file.as_deref(), &ctx.out_dir)?;
    let out = run_closed_loop(&s, &model, &truth)?;
    let m = write_run(ctx, &args.name, &s, &out)?;
    println!("{}", summary_line(&args.name, &m));
    match out.error {
        Some(e) => Err(Failure::Runtime(format!("run aborted after {} samples: {e}", out.log.rows.len()))),
        None => Ok(()),
    }
}

fn simulate_batch(ctx: &Ctx, args: &SimArgs) -> Res<()> {
    let mut jobs = Vec::new();
    for path in &args.batch {
        let s = Scenario::load(path).map_err(in_file(path))?;
        let truth = s.truth.build().map_err(in_file(path))?;
        let model = resolve_model(&s, s.controller.model, None, &ctx.out_dir)?;
        let name = path.file_stem().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
        jobs.push((name, s, model, truth));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some((n, ..)) = jobs.iter().find(|(n, ..)| !seen.insert(n.clone())) {
        return Err(Failure::Usage(format!("two batch scenarios share the output name `{n}`")));
    }
    ctx.say(format!("running {} scenarios", jobs.len()));
    let outcomes = par::map(Exec::Parallel, &jobs, |(_, s, m, t)| run_closed_loop(s, m, t));
    let mut failures = Vec::new();
    for ((name, s, ..), out) in jobs.iter().zip(outcomes) {
        match out {
            Ok(out) => {
                let m = write_run(ctx, name, s, &out)?;
                println!("{}", summary_line(name, &m));
                if let Some(e) = out.error {
                    failures.push(format!("{name}: {e}"));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(failures.join("; ")))
    }
}

fn print_reductions<'a>(runs: impl Iterator<Item = (String, &'a Metrics)>) {
    let runs: Vec<_> = runs.collect();
    for i in 0..runs.len() {
        for (b, mb) in &runs[i + 1..] {
            let (a, ma) = &runs[i];
            println!(
                "{b} vs {a}: force rmse {:+.1}% reduction, position rmse {:+.1}% reduction",
                reduction_percent(ma.force_rmse, mb.force_rmse),
                reduction_percent(ma.position_rmse, mb.position_rmse)
            );
        }
    }
}

fn load_log(path: &Path) -> Res<TrajectoryLog> {
    let mut log = TrajectoryLog::read_csv(open(path)?).map_err(in_file(path))?;
    let timing = timing_sibling(path);
    if timing.exists() {
        log.timing = TrajectoryLog::read_timing_csv(open(&timing)?).map_err(in_file(&timing))?;
    }
    if log.rows.is_empty() {
        return Err(Failure::Usage(format!("{}: no samples", path.display())));
    }
    Ok(log)
}

fn timing_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().replace("_trajectory.csv", "_timing.csv")).unwrap_or_default();
    path.with_file_name(name)
}

fn run_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().trim_end_matches(".csv").trim_end_matches("_trajectory").to_string()).unwrap_or_default()
}

pub fn evaluate(ctx: &Ctx, logs: &[PathBuf]) -> Res<()> {
    let c = &ctx.scenario.controller.constraints;
    let mut rows = Vec::new();
    for p in logs {
        let log = load_log(p)?;
        let m = compute_metrics(&log, c)?;
        println!("[{}]\n{}", p.display(), m.to_text()?);
        rows.push((run_name(p), m));
    }
    if rows.len() > 1 {
        print_reductions(rows.iter().map(|(n, m)| (n.clone(), m)));
    }
    Ok(())
}

pub fn report(ctx: &Ctx, logs: &[PathBuf]) -> Res<()> {
    let logs: Vec<PathBuf> = if logs.is_empty() {
        let dir = std::fs::read_dir(&ctx.out_dir).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", ctx.out_dir.display())))?;
        let mut v: Vec<PathBuf> =
            dir.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.to_string_lossy().ends_with("_trajectory.csv")).collect();
        v.sort();
        v
    } else {
        logs.to_vec()
    };
    if logs.is_empty() {
        return Err(Failure::Usage(format!("no *_trajectory.csv files in {}", ctx.out_dir.display())));
    }
    ctx.ensure_out()?;
    let s = &ctx.scenario;
    let c = &s.controller.constraints;
    let mut md = String::from("# Closed-loop report\n\n");
    md.push_str(&format!(
        "Horizon {} x {} s, force box [{}, {}] N, tightening {:?} (confidence {}).\n\n",
        s.controller.ocp.horizon_steps, s.controller.ocp.dt, c.force_lo, c.force_hi, s.tightening.mode, s.tightening.confidence
    ));
    md.push_str("| run | force RMSE [N] | position RMSE [m] | min / max force [N] | violations | contact loss | theta end | boxes kept | solve mean / p99 [ms] |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    let mut rows = Vec::new();
    for p in &logs {
        let log = load_log(p)?;
        let m = compute_metrics(&log, c)?;
        let name = run_name(p);
        write_plots(ctx, &name, &log, c)?;
        md.push_str(&format!(
            "| {name} | {:.4} | {:.2e} | {:.3} / {:.3} | {:.1}% | {} | {:.4} | {} | {:.1} / {:.1} |\n",
            m.force_rmse,
            m.position_rmse,
            m.min_true_force,
            m.max_true_force,
            100.0 * m.violation_fraction,
            m.contact_loss_samples,
            m.theta_end,
            m.boxes_satisfied,
            1e3 * m.mean_solver_time,
            1e3 * m.p99_solver_time
        ));
        rows.push((name, m));
    }
    if rows.len() > 1 {
        md.push_str("\n## Force RMSE reduction relative to the first run\n\n");
        let (first, m0) = &rows[0];
        for (name, m) in &rows[1..] {
            md.push_str(&format!("- {name} vs {first}: {:.1}%\n", reduction_percent(m0.force_rmse, m.force_rmse)));
        }
    }
    md.push_str("\n## Plots\n\n");
    for (name, _) in &rows {
        for suffix in ["position", "theta", "force", "joints"] {
            md.push_str(&format!("![{name} {suffix}]({name}_{suffix}.svg)\n"));
        }
        md.push('\n');
    }
    let path = ctx.out("report.md");
    write_text(&path, &md)?;
    println!("report -> {}", path.display());
    Ok(())
}
