//! One function per subcommand. Each validates the whole configuration
//! before it builds a model or starts propagating.

use qramp_core::linalg::eigh;
use qramp_core::optimizer::{
    baseline_fidelity, check_cutoffs, escalate_m, estimate_qsl, min_duration_for,
    reevaluate_protocol, write_scan_csv, OutcomeRecord,
};
use qramp_core::robustness::{noise_sweep, write_sweep_csv, NoiseConfig};
use qramp_core::{
    ControlProblem, ControlProtocol, Error, ModelSpec, QslEstimate, RangeScenario, Result, Scenario,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{read_record, RunDir};

fn run_dir(cfg: &RunConfig) -> Result<RunDir> {
    RunDir::create(&cfg.output_dir, cfg.hash(), cfg.seed)
}

fn problem(cfg: &RunConfig, scenario: &Scenario) -> Result<ControlProblem> {
    ControlProblem::new(scenario, cfg.tolerances, cfg.cache_dir.as_deref())
}

fn write_field(dir: &RunDir, protocol: &ControlProtocol, n: usize) -> Result<()> {
    let t_end = protocol.duration();
    dir.csv("field.csv", |w| {
        writeln!(w, "t,g")?;
        for j in 0..n {
            let t = if j == n - 1 {
                t_end
            } else {
                t_end * j as f64 / (n - 1) as f64
            };
            let g = protocol.eval_field(t).expect("t inside [0, T]");
            writeln!(w, "{t},{g}")?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn optimize(cfg: &RunConfig) -> Result<()> {
    cfg.validate_common()?;
    let scenario = cfg.scenario()?;
    let duration = cfg
        .schedule
        .duration
        .ok_or_else(|| Error::Validation("schedule.duration is required".into()))?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Validation(format!(
            "schedule.duration must be positive, got {duration}"
        )));
    }

    let problem = problem(cfg, &scenario)?;
    let opts = cfg.optimize_options();
    let esc = escalate_m(&problem, duration, &cfg.escalation(), &opts, None)?;
    let best = &esc.best;
    let protocol = best.protocol(scenario.range)?;

    let dir = run_dir(cfg)?;
    dir.json("outcome.json", &best.to_record(&scenario, cfg.seed))?;
    dir.json("protocol.json", &protocol.to_record())?;
    dir.csv("trajectory.csv", |w| best.trajectory.write_csv(w))?;
    write_field(&dir, &protocol, cfg.schedule.n_samples)?;
    dir.csv("escalation.csv", |w| {
        writeln!(w, "M,F_best")?;
        for (m, f) in &esc.history {
            writeln!(w, "{m},{f}")?;
        }
        Ok(())
    })?;
    println!(
        "T = {duration}: F = {} with M = {} ({} BFGS iterations, {:?}); initial overlap {}",
        best.best_fidelity,
        best.m_points,
        best.iterations,
        best.termination,
        problem.initial_fidelity()
    );
    Ok(())
}

fn qsl_one(cfg: &RunConfig, scenario: &Scenario, bracket: (f64, f64)) -> Result<QslEstimate> {
    let problem = problem(cfg, scenario)?;
    let f0 = baseline_fidelity(&problem)?;
    if scenario.threshold <= f0 {
        eprintln!(
            "warning: threshold {} is not above the initial overlap {f0}; the estimate sits at the bracket floor",
            scenario.threshold
        );
    }
    let opts = cfg.optimize_options();
    match cfg.schedule.fixed_m {
        Some(m) => min_duration_for(
            &problem,
            m,
            scenario.threshold,
            bracket,
            cfg.schedule.resolution,
            &opts,
        ),
        None => estimate_qsl(
            &problem,
            scenario.threshold,
            bracket,
            cfg.schedule.resolution,
            &cfg.escalation(),
            &opts,
        ),
    }
}

#[derive(Serialize)]
struct SweepRow {
    g_min: f64,
    g_max: f64,
    estimate: QslEstimate,
}

pub fn qsl(cfg: &RunConfig) -> Result<()> {
    cfg.validate_common()?;
    let scenario = cfg.scenario()?;
    let [lo, hi] = cfg
        .schedule
        .bracket
        .ok_or_else(|| Error::Validation("schedule.bracket is required".into()))?;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::Validation(format!(
            "schedule.bracket [{lo}, {hi}] must satisfy 0 < lo < hi"
        )));
    }
    let sweep: Vec<Scenario> = cfg
        .schedule
        .range_sweep
        .iter()
        .map(|r| {
            Ok(Scenario {
                range: RangeScenario::new(r[0], r[1])?,
                ..scenario.clone()
            })
        })
        .collect::<Result<_>>()?;

    let est = qsl_one(cfg, &scenario, (lo, hi))?;
    let dir = run_dir(cfg)?;
    dir.json("qsl.json", &est)?;
    dir.csv("scan.csv", |w| write_scan_csv(&est.scan, w))?;
    println!(
        "T_QSL = {} (threshold {}, {} durations probed)",
        est.t_qsl,
        est.threshold,
        est.scan.len()
    );

    if !sweep.is_empty() {
        let mut rows = Vec::new();
        for s in &sweep {
            let e = qsl_one(cfg, s, (lo, hi))?;
            println!(
                "range [{}, {}]: T_QSL = {}",
                s.range.g_min(),
                s.range.g_max(),
                e.t_qsl
            );
            rows.push(SweepRow {
                g_min: s.range.g_min(),
                g_max: s.range.g_max(),
                estimate: e,
            });
        }
        dir.json("qsl_sweep.json", &rows)?;
        dir.csv("qsl_sweep.csv", |w| {
            writeln!(w, "g_min,g_max,T_QSL")?;
            for r in &rows {
                writeln!(w, "{},{},{}", r.g_min, r.g_max, r.estimate.t_qsl)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn load_outcome(path: &std::path::Path) -> Result<OutcomeRecord> {
    let rec: OutcomeRecord = read_record(path)?;
    rec.validate()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok(rec)
}

pub fn noise(cfg: &RunConfig) -> Result<()> {
    cfg.validate_common()?;
    let n = cfg
        .noise
        .as_ref()
        .ok_or_else(|| Error::Validation("[noise] section is required".into()))?;
    if n.sigmas.is_empty() {
        return Err(Error::Validation("noise.sigmas must not be empty".into()));
    }
    for &sigma in &n.sigmas {
        NoiseConfig {
            sigma,
            n_realizations: n.n_realizations,
            seed: cfg.seed,
            clamp_noisy: n.clamp_noisy,
        }
        .validate()?;
    }
    let rec = load_outcome(&n.outcome)?;
    let protocol = rec.protocol()?;

    let problem = problem(cfg, &rec.scenario)?;
    let reports = noise_sweep(
        &problem,
        &protocol,
        &n.sigmas,
        n.n_realizations,
        cfg.seed,
        n.clamp_noisy,
    )?;
    let dir = run_dir(cfg)?;
    dir.csv("noise_sweep.csv", |w| write_sweep_csv(&reports, w))?;
    dir.json("noise_reports.json", &reports)?;
    for r in &reports {
        println!(
            "sigma = {}: mean F = {} (std {}, sem {})",
            r.sigma, r.mean_f, r.std_f, r.sem_f
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ConvergeRow {
    model: ModelSpec,
    final_fidelity: f64,
    delta: f64,
    flagged: bool,
}

fn alternatives(original: &ModelSpec, cs: &[usize], ks: &[usize]) -> Result<Vec<ModelSpec>> {
    let mut out = Vec::new();
    for &c in cs {
        out.push(match *original {
            ModelSpec::TwoComponent(mut p) => {
                p.cutoff_c = c;
                ModelSpec::TwoComponent(p)
            }
            ModelSpec::ThreeComponent(mut p) => {
                p.base.cutoff_c = c;
                ModelSpec::ThreeComponent(p)
            }
            ModelSpec::TwoQubit(_) => {
                return Err(Error::Validation(
                    "the two-qubit model has no cutoff C".into(),
                ))
            }
        });
    }
    for &k in ks {
        out.push(match *original {
            ModelSpec::ThreeComponent(mut p) => {
                p.cutoff_k = k;
                ModelSpec::ThreeComponent(p)
            }
            _ => {
                return Err(Error::Validation(
                    "cutoff K exists only for the three-component model".into(),
                ))
            }
        });
    }
    for alt in &out {
        alt.validate()?;
        check_cutoffs(original, alt)?;
    }
    Ok(out)
}

fn label(m: &ModelSpec) -> String {
    match m {
        ModelSpec::TwoQubit(_) => "two_qubit".into(),
        ModelSpec::TwoComponent(p) => format!("C{}", p.cutoff_c),
        ModelSpec::ThreeComponent(p) => format!("C{}_K{}", p.base.cutoff_c, p.cutoff_k),
    }
}

pub fn converge(cfg: &RunConfig) -> Result<()> {
    cfg.validate_common()?;
    let c = cfg
        .converge
        .as_ref()
        .ok_or_else(|| Error::Validation("[converge] section is required".into()))?;
    if c.cutoffs_c.is_empty() && c.cutoffs_k.is_empty() {
        return Err(Error::Validation(
            "converge needs cutoffs_c or cutoffs_k".into(),
        ));
    }
    let rec = load_outcome(&c.outcome)?;
    let alts = alternatives(&rec.scenario.model, &c.cutoffs_c, &c.cutoffs_k)?;
    let protocol = rec.protocol()?;
    let n = cfg.schedule.n_samples;

    let reference = problem(cfg, &rec.scenario)?.trajectory(&protocol, n)?;
    let f_ref = reference.final_fidelity();
    let dir = run_dir(cfg)?;
    dir.csv(
        &format!("trajectory_{}.csv", label(&rec.scenario.model)),
        |w| reference.write_csv(w),
    )?;
    let mut rows = Vec::new();
    for alt in alts {
        let traj = reevaluate_protocol(
            &protocol,
            &rec.scenario,
            alt,
            cfg.tolerances,
            n,
            cfg.cache_dir.as_deref(),
        )?;
        dir.csv(&format!("trajectory_{}.csv", label(&alt)), |w| {
            traj.write_csv(w)
        })?;
        let f = traj.final_fidelity();
        let delta = f - f_ref;
        let flagged = delta.abs() > c.tolerance;
        println!(
            "{}: F = {f}, delta = {delta:e}{}",
            label(&alt),
            if flagged { " (above tolerance)" } else { "" }
        );
        rows.push(ConvergeRow {
            model: alt,
            final_fidelity: f,
            delta,
            flagged,
        });
    }
    dir.csv("converge.csv", |w| {
        writeln!(w, "model,F_final,delta")?;
        for r in &rows {
            writeln!(w, "{},{},{}", label(&r.model), r.final_fidelity, r.delta)?;
        }
        Ok(())
    })?;
    dir.json("converge.json", &rows)?;
    Ok(())
}

pub fn spectrum(cfg: &RunConfig) -> Result<()> {
    cfg.validate_common()?;
    let s = cfg
        .spectrum
        .as_ref()
        .ok_or_else(|| Error::Validation("[spectrum] section is required".into()))?;
    if s.n_points == 0 || s.n_levels == 0 {
        return Err(Error::Validation(
            "spectrum.n_points and spectrum.n_levels must be positive".into(),
        ));
    }
    if !(s.g_min.is_finite() && s.g_max.is_finite()) || (s.n_points > 1 && s.g_max <= s.g_min) {
        return Err(Error::Validation(format!(
            "spectrum range [{}, {}] is invalid",
            s.g_min, s.g_max
        )));
    }
    let spec = cfg.model.spec()?;
    let model = spec.build(cfg.cache_dir.as_deref())?;
    if s.n_levels > model.dim() {
        return Err(Error::Validation(format!(
            "{} levels requested, model dim is {}",
            s.n_levels,
            model.dim()
        )));
    }
    let gs: Vec<f64> = (0..s.n_points)
        .map(|j| {
            if s.n_points == 1 {
                s.g_min
            } else {
                s.g_min + (s.g_max - s.g_min) * j as f64 / (s.n_points - 1) as f64
            }
        })
        .collect();
    let rows: Vec<Vec<f64>> = gs
        .iter()
        .map(|&g| Ok(eigh(&model.hamiltonian(g))?.energies[..s.n_levels].to_vec()))
        .collect::<Result<_>>()?;
    let dir = run_dir(cfg)?;
    dir.csv("spectrum.csv", |w| {
        let head: Vec<String> = (0..s.n_levels).map(|i| format!("E{i}")).collect();
        writeln!(w, "g,{}", head.join(","))?;
        for (g, e) in gs.iter().zip(&rows) {
            let cols: Vec<String> = e.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{g},{}", cols.join(","))?;
        }
        Ok(())
    })?;
    println!(
        "{} levels at {} couplings written to {}",
        s.n_levels,
        s.n_points,
        dir.path("spectrum.csv").display()
    );
    Ok(())
}

/// Exit-code contract: 2 validation, 3 numerical, 4 bracketing.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Parse(_) | Error::DegenerateGroundState { .. } => 2,
        Error::Bracket { .. } => 4,
        Error::Numerical(_)
        | Error::Integration { .. }
        | Error::AllStartsFailed { .. }
        | Error::Io(_) => 3,
    }
}
