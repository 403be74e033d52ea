//! Knot optimization: BFGS on the box-transformed knots, M escalation,
//! minimal-duration bisection and re-evaluation under other cutoffs.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    from_unconstrained, knot_times, to_unconstrained, ControlProtocol, RangeScenario,
};
use crate::error::{Error, Result};
use crate::linalg::{fidelity_pure, StateVector};
use crate::models::{embed_with_spectator, make_scenario_states, ModelInstance, ModelSpec};
use crate::propagator::{FidelityEvaluator, FidelityMode, Propagator, Tolerances, Trajectory};

/// One experiment: model, initial/target couplings, accessible range and
/// the fidelity threshold of interest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: ModelSpec,
    pub g1: f64,
    pub g2: f64,
    pub range: RangeScenario,
    pub fidelity_mode: FidelityMode,
    pub threshold: f64,
}

impl Scenario {
    /// The fidelity mode follows the model family: reduced for runs with a
    /// spectator, pure otherwise.
    pub fn new(
        model: ModelSpec,
        g1: f64,
        g2: f64,
        range: RangeScenario,
        threshold: f64,
    ) -> Result<Self> {
        let fidelity_mode = match model {
            ModelSpec::ThreeComponent(_) => FidelityMode::Reduced,
            _ => FidelityMode::Pure,
        };
        let s = Self {
            model,
            g1,
            g2,
            range,
            fidelity_mode,
            threshold,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.g1.is_finite() && self.g2.is_finite()) {
            return Err(Error::validation("g1 and g2 must be finite"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        let reduced = matches!(self.model, ModelSpec::ThreeComponent(_));
        if reduced != (self.fidelity_mode == FidelityMode::Reduced) {
            return Err(Error::validation(
                "reduced fidelity is used exactly for three-component models",
            ));
        }
        Ok(())
    }
}

/// A scenario with its model, states and propagator built once.
#[derive(Clone, Debug)]
pub struct ControlProblem {
    scenario: Scenario,
    model: ModelInstance,
    ini: StateVector,
    evaluator: FidelityEvaluator,
    propagator: Propagator,
}

impl ControlProblem {
    pub fn new(
        scenario: &Scenario,
        tol: Tolerances,
        cache_dir: Option<&std::path::Path>,
    ) -> Result<Self> {
        scenario.validate()?;
        let model = scenario.model.build(cache_dir)?;
        let (ini, tar) = match scenario.model {
            ModelSpec::ThreeComponent(p) => {
                let ab = scenario.model.target_family().build(cache_dir)?;
                let (ini_ab, tar_ab) = make_scenario_states(&ab, scenario.g1, scenario.g2)?;
                (embed_with_spectator(&ini_ab, p.cutoff_k, 0)?, tar_ab)
            }
            _ => make_scenario_states(&model, scenario.g1, scenario.g2)?,
        };
        Self::from_parts(scenario.clone(), model, ini, tar, tol)
    }

    /// Uses a prebuilt model; `ini` and `tar` are the ground states of
    /// `model` at `g1` and `g2`.
    pub fn from_model(scenario: &Scenario, model: ModelInstance, tol: Tolerances) -> Result<Self> {
        if matches!(scenario.model, ModelSpec::ThreeComponent(_)) {
            return Err(Error::validation(
                "three-component problems need the spectator-free target model",
            ));
        }
        let (ini, tar) = make_scenario_states(&model, scenario.g1, scenario.g2)?;
        Self::from_parts(scenario.clone(), model, ini, tar, tol)
    }

    fn from_parts(
        scenario: Scenario,
        model: ModelInstance,
        ini: StateVector,
        tar: StateVector,
        tol: Tolerances,
    ) -> Result<Self> {
        let evaluator = FidelityEvaluator::new(scenario.fidelity_mode, tar, &model)?;
        let propagator = Propagator::new(&model, tol)?;
        Ok(Self {
            scenario,
            model,
            ini,
            evaluator,
            propagator,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn model(&self) -> &ModelInstance {
        &self.model
    }

    pub fn initial_state(&self) -> &StateVector {
        &self.ini
    }

    pub fn evaluator(&self) -> &FidelityEvaluator {
        &self.evaluator
    }

    /// Fidelity of doing nothing.
    pub fn initial_fidelity(&self) -> f64 {
        self.evaluator.evaluate(self.ini.amplitudes().view())
    }

    pub fn fidelity(&self, protocol: &ControlProtocol) -> Result<f64> {
        Ok(self.trajectory(protocol, 2)?.final_fidelity())
    }

    pub fn trajectory(&self, protocol: &ControlProtocol, n_samples: usize) -> Result<Trajectory> {
        self.propagator
            .propagate(protocol, &self.ini, n_samples, &self.evaluator)
    }

    /// `1 - F` of the protocol with knots `from_unconstrained(u)`.
    pub fn objective(&self, u: &[f64], duration: f64) -> Result<f64> {
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("non-finite point in knot space"));
        }
        let knots = from_unconstrained(u, self.scenario.range);
        let p = ControlProtocol::new(duration, knots, self.scenario.range)?;
        Ok(1.0 - self.fidelity(&p)?)
    }
}

/// Central differences with step `h` per coordinate.
pub fn gradient_fd<F>(f: F, u: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    (0..u.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = u.to_vec();
            probe[i] = u[i] + h;
            let fp = f(&probe)?;
            probe[i] = u[i] - h;
            let fm = f(&probe)?;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite objective while differentiating coordinate {i}"
                )));
            }
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfgsOptions {
    pub gtol: f64,
    pub ftol: f64,
    pub max_iter: usize,
    pub c1: f64,
    pub c2: f64,
    /// Cap on the infinity norm of the first trial step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            gtol: 1e-8,
            ftol: 1e-12,
            max_iter: 500,
            c1: 1e-4,
            c2: 0.9,
            max_step: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    FunctionDecrease,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BfgsResult {
    pub u: Vec<f64>,
    pub f: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl BfgsResult {
    pub fn line_search_failed(&self) -> bool {
        self.termination == Termination::LineSearchFailed
    }
}

/// Point on the search line with lazily computed gradient.
struct LinePoint {
    alpha: f64,
    f: f64,
    x: Vec<f64>,
    g: Option<Vec<f64>>,
}

/// Quasi-Newton minimization with the inverse-Hessian BFGS update and a
/// strong Wolfe line search. Failed objective evaluations count as `+inf`
/// (rejected trial steps).
pub fn bfgs_minimize<F, G>(f: F, grad: G, u0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = u0.len();
    let mut x = u0.to_vec();
    let mut fx = f(&x)?;
    let mut gx = grad(&x)?;
    let mut hinv = identity(n);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < opts.max_iter {
        if inf_norm(&gx) < opts.gtol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut p = mat_vec_neg(&hinv, &gx);
        if dot(&p, &gx) >= 0.0 {
            hinv = identity(n);
            p = gx.iter().map(|v| -v).collect();
        }
        let mut found = strong_wolfe(&f, &grad, &x, fx, &gx, &p, opts);
        if found.is_none() && !is_identity(&hinv) {
            hinv = identity(n);
            p = gx.iter().map(|v| -v).collect();
            found = strong_wolfe(&f, &grad, &x, fx, &gx, &p, opts);
        }
        let Some(next) = found else {
            termination = Termination::LineSearchFailed;
            break;
        };
        iterations += 1;
        let g_new = next.g.expect("accepted points carry a gradient");
        let s: Vec<f64> = next.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-12 {
            if iterations == 1 {
                let scale = ys / dot(&y, &y);
                hinv = identity(n)
                    .into_iter()
                    .map(|row| row.into_iter().map(|v| v * scale).collect())
                    .collect();
            }
            bfgs_update(&mut hinv, &s, &y, ys);
        }
        let decrease = fx - next.f;
        x = next.x;
        fx = next.f;
        gx = g_new;
        if decrease < opts.ftol {
            termination = if inf_norm(&gx) < opts.gtol {
                Termination::GradientTolerance
            } else {
                Termination::FunctionDecrease
            };
            break;
        }
    }
    Ok(BfgsResult {
        gradient_norm: inf_norm(&gx),
        u: x,
        f: fx,
        iterations,
        termination,
    })
}

/// Line search satisfying the strong Wolfe conditions, bracketing then
/// zooming with safeguarded quadratic interpolation.
fn strong_wolfe<F, G>(
    f: &F,
    grad: &G,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    p: &[f64],
    opts: &BfgsOptions,
) -> Option<LinePoint>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d0 = dot(g0, p);
    if !(d0 < 0.0) {
        return None;
    }
    let point = |alpha: f64| -> LinePoint {
        let xa: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + alpha * b).collect();
        let fa = f(&xa)
            .ok()
            .filter(|v| v.is_finite())
            .unwrap_or(f64::INFINITY);
        LinePoint {
            alpha,
            f: fa,
            x: xa,
            g: None,
        }
    };
    // returns directional derivative, or None if the gradient failed
    let slope = |pt: &mut LinePoint| -> Option<f64> {
        if pt.g.is_none() {
            pt.g = grad(&pt.x).ok().filter(|g| g.iter().all(|v| v.is_finite()));
        }
        pt.g.as_ref().map(|g| dot(g, p))
    };

    let p_norm = inf_norm(p);
    let alpha1 = if p_norm > opts.max_step {
        opts.max_step / p_norm
    } else {
        1.0
    };
    let alpha_max = 1e3 * alpha1;
    let mut prev = LinePoint {
        alpha: 0.0,
        f: f0,
        x: x.to_vec(),
        g: Some(g0.to_vec()),
    };
    let mut prev_d = d0;
    let mut alpha = alpha1;
    for i in 0..30 {
        let mut cur = point(alpha);
        if cur.f > f0 + opts.c1 * alpha * d0 || (i > 0 && cur.f >= prev.f) {
            return zoom(f0, d0, prev, prev_d, cur, opts, &point, &slope);
        }
        let d = slope(&mut cur)?;
        if d.abs() <= -opts.c2 * d0 {
            return Some(cur);
        }
        if d >= 0.0 {
            return zoom(f0, d0, cur, d, prev, opts, &point, &slope);
        }
        if alpha >= alpha_max {
            return None;
        }
        prev = cur;
        prev_d = d;
        alpha = (2.0 * alpha).min(alpha_max);
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    f0: f64,
    d0: f64,
    mut lo: LinePoint,
    mut lo_d: f64,
    mut hi: LinePoint,
    opts: &BfgsOptions,
    point: &dyn Fn(f64) -> LinePoint,
    slope: &dyn Fn(&mut LinePoint) -> Option<f64>,
) -> Option<LinePoint> {
    for _ in 0..40 {
        let width = hi.alpha - lo.alpha;
        if width.abs() < 1e-14 * lo.alpha.abs().max(1e-10) {
            break;
        }
        // minimizer of the quadratic through (lo, f_lo, d_lo) and (hi, f_hi)
        let mut alpha = if hi.f.is_finite() {
            let denom = 2.0 * (hi.f - lo.f - lo_d * width);
            if denom > 0.0 {
                lo.alpha - lo_d * width * width / denom
            } else {
                f64::NAN
            }
        } else {
            f64::NAN
        };
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let margin = 0.1 * (b - a);
        if !(alpha > a + margin && alpha < b - margin) {
            alpha = 0.5 * (lo.alpha + hi.alpha);
        }
        let mut cur = point(alpha);
        if cur.f > f0 + opts.c1 * alpha * d0 || cur.f >= lo.f {
            hi = cur;
            continue;
        }
        let Some(d) = slope(&mut cur) else {
            hi = cur;
            continue;
        };
        if d.abs() <= -opts.c2 * d0 {
            return Some(cur);
        }
        if d * (hi.alpha - lo.alpha) >= 0.0 {
            hi = lo;
        }
        lo = cur;
        lo_d = d;
    }
    None
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn is_identity(m: &[Vec<f64>]) -> bool {
    m.iter().enumerate().all(|(i, row)| {
        row.iter()
            .enumerate()
            .all(|(j, v)| *v == if i == j { 1.0 } else { 0.0 })
    })
}

fn mat_vec_neg(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| -dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `H <- (I - r s y^T) H (I - r y s^T) + r s s^T`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], ys: f64) {
    let n = s.len();
    let r = 1.0 / ys;
    let hy: Vec<f64> = h.iter().map(|row| dot(row, y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -r * (s[i] * hy[j] + hy[i] * s[j]) + (r * r * yhy + r) * s[i] * s[j];
        }
    }
}

/// Multi-start settings for [`optimize_at`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeOptions {
    pub n_restarts: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub n_samples: usize,
    pub bfgs: BfgsOptions,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            n_restarts: 10,
            seed: 0,
            fd_step: 1e-5,
            n_samples: 201,
            bfgs: BfgsOptions::default(),
        }
    }
}

/// Best protocol found for one `(T, M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationOutcome {
    pub best_fidelity: f64,
    pub knots: Vec<f64>,
    pub duration: f64,
    pub m_points: usize,
    pub restarts_used: usize,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub termination: Termination,
    pub trajectory: Trajectory,
}

impl OptimizationOutcome {
    pub fn protocol(&self, range: RangeScenario) -> Result<ControlProtocol> {
        ControlProtocol::new(self.duration, self.knots.clone(), range)
    }

    pub fn to_record(&self, scenario: &Scenario, seed: u64) -> OutcomeRecord {
        OutcomeRecord {
            scenario: scenario.clone(),
            duration: self.duration,
            m_points: self.m_points,
            best_fidelity: self.best_fidelity,
            knots: self.knots.clone(),
            seed,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm,
            restarts_used: self.restarts_used,
        }
    }
}

/// Persisted form of an [`OptimizationOutcome`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub scenario: Scenario,
    #[serde(rename = "T")]
    pub duration: f64,
    #[serde(rename = "M")]
    pub m_points: usize,
    pub best_fidelity: f64,
    pub knots: Vec<f64>,
    pub seed: u64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub restarts_used: usize,
}

impl OutcomeRecord {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.knots.len() != self.m_points {
            return Err(Error::Parse(format!(
                "{} knots recorded for M = {}",
                self.knots.len(),
                self.m_points
            )));
        }
        if !(0.0..=1.0).contains(&self.best_fidelity) {
            return Err(Error::Parse(format!(
                "best_fidelity {} outside [0, 1]",
                self.best_fidelity
            )));
        }
        self.protocol().map(|_| ())
    }

    pub fn protocol(&self) -> Result<ControlProtocol> {
        ControlProtocol::new(self.duration, self.knots.clone(), self.scenario.range)
    }
}

/// Per-task generator keyed by `(seed, M, start index)`.
fn start_rng(seed: u64, m: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((m as u64) << 32) | index as u64);
    rng
}

/// Linear ramp from `g1` toward `g2`, clipped to the range.
pub fn ramp_knots(scenario: &Scenario, duration: f64, m: usize) -> Vec<f64> {
    knot_times(duration, m)
        .into_iter()
        .map(|t| {
            scenario
                .range
                .clamp(scenario.g1 + (scenario.g2 - scenario.g1) * t / duration)
        })
        .collect()
}

/// Multi-start BFGS at fixed `T` and `M`: a clipped ramp, an optional warm
/// start, then `n_restarts` uniform random starts.
pub fn optimize_at(
    problem: &ControlProblem,
    duration: f64,
    m: usize,
    opts: &OptimizeOptions,
    warm_start: Option<&[f64]>,
) -> Result<OptimizationOutcome> {
    if m == 0 {
        return Err(Error::validation("M must be at least 1"));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::validation(format!(
            "duration must be positive, got {duration}"
        )));
    }
    let range = problem.scenario.range;
    let mut starts = vec![ramp_knots(&problem.scenario, duration, m)];
    if let Some(w) = warm_start {
        if w.len() != m {
            return Err(Error::validation(format!(
                "warm start has {} knots, expected {m}",
                w.len()
            )));
        }
        starts.push(w.iter().map(|g| range.clamp(*g)).collect());
    }
    let offset = starts.len();
    starts.extend((0..opts.n_restarts).map(|i| {
        let mut rng = start_rng(opts.seed, m, i);
        (0..m)
            .map(|_| range.g_min() + range.width() * rng.random::<f64>())
            .collect()
    }));

    let objective = |u: &[f64]| problem.objective(u, duration);
    let gradient = |u: &[f64]| gradient_fd(objective, u, opts.fd_step);
    let results: Vec<(usize, Result<BfgsResult>)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, knots)| {
            (
                i,
                bfgs_minimize(
                    objective,
                    gradient,
                    &to_unconstrained(knots, range),
                    &opts.bfgs,
                ),
            )
        })
        .collect();

    let mut best: Option<BfgsResult> = None;
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.f < b.f) {
                    best = Some(r);
                }
            }
            Err(e) => {
                let label = if i < offset {
                    format!("seeded start {i}")
                } else {
                    format!("random start {}", i - offset)
                };
                failures.push(format!("{label}: {e}"));
            }
        }
    }
    let best = best.ok_or_else(|| Error::AllStartsFailed {
        attempts: starts.len(),
        diagnostics: failures.join("; "),
    })?;
    let knots = from_unconstrained(&best.u, range);
    let protocol = ControlProtocol::new(duration, knots.clone(), range)?;
    let trajectory = problem.trajectory(&protocol, opts.n_samples.max(2))?;
    Ok(OptimizationOutcome {
        best_fidelity: trajectory.final_fidelity(),
        knots,
        duration,
        m_points: m,
        restarts_used: starts.len(),
        iterations: best.iterations,
        gradient_norm: best.gradient_norm,
        termination: best.termination,
        trajectory,
    })
}

/// Knot-count schedule for [`escalate_m`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EscalationOptions {
    pub m_schedule: Vec<usize>,
    pub eps_m: f64,
    /// Stop as soon as this fidelity is reached.
    pub stop_at: Option<f64>,
}

impl Default for EscalationOptions {
    fn default() -> Self {
        Self {
            m_schedule: vec![2, 3, 5, 7, 9, 12, 16, 20],
            eps_m: 1e-4,
            stop_at: None,
        }
    }
}

impl EscalationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.m_schedule.is_empty() || self.m_schedule[0] == 0 {
            return Err(Error::validation(
                "m_schedule must be non-empty with positive entries",
            ));
        }
        if self.m_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("m_schedule must be strictly ascending"));
        }
        if !(self.eps_m >= 0.0) {
            return Err(Error::validation("eps_m must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Escalation {
    /// Running maximum of the fidelity along the schedule.
    pub f_max: f64,
    /// `M` of the best outcome.
    pub m_used: usize,
    pub best: OptimizationOutcome,
    /// `(M, best fidelity at that M)` in schedule order.
    pub history: Vec<(usize, f64)>,
}

/// Runs [`optimize_at`] along the schedule, warm-starting each `M` from the
/// best protocol so far resampled onto the new knot grid, until the gain
/// drops below `eps_m`.
pub fn escalate_m(
    problem: &ControlProblem,
    duration: f64,
    esc: &EscalationOptions,
    opts: &OptimizeOptions,
    warm_start: Option<&ControlProtocol>,
) -> Result<Escalation> {
    esc.validate()?;
    let range = problem.scenario.range;
    let mut best: Option<OptimizationOutcome> = None;
    let mut history = Vec::new();
    for &m in &esc.m_schedule {
        let seed_protocol = match (&best, warm_start) {
            (Some(b), _) => Some(b.protocol(range)?),
            (None, Some(w)) => Some(ControlProtocol::with_unbounded_knots(
                duration,
                w.knots().to_vec(),
                range,
            )?),
            (None, None) => None,
        };
        let warm = seed_protocol.map(|p| p.resampled(m)).transpose()?;
        let outcome = optimize_at(problem, duration, m, opts, warm.as_ref().map(|p| p.knots()))?;
        history.push((m, outcome.best_fidelity));
        let previous = best.as_ref().map(|b| b.best_fidelity);
        if previous.is_none_or(|f| outcome.best_fidelity > f) {
            best = Some(outcome);
        }
        let f_max = best.as_ref().map(|b| b.best_fidelity).unwrap_or(0.0);
        if esc.stop_at.is_some_and(|s| f_max >= s) {
            break;
        }
        if previous.is_some_and(|f| f_max - f < esc.eps_m) {
            break;
        }
    }
    let best = best.expect("schedule is non-empty");
    Ok(Escalation {
        f_max: best.best_fidelity,
        m_used: best.m_points,
        best,
        history,
    })
}

/// One probed duration of a speed-limit scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    #[serde(rename = "T")]
    pub duration: f64,
    #[serde(rename = "M_used")]
    pub m_used: usize,
    #[serde(rename = "F_max")]
    pub f_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QslEstimate {
    pub t_qsl: f64,
    pub threshold: f64,
    /// Probed durations, ascending.
    pub scan: Vec<ScanPoint>,
    pub resolution: f64,
}

/// Writes `T,M_used,F_max`.
pub fn write_scan_csv<W: Write>(scan: &[ScanPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "T,M_used,F_max")?;
    for p in scan {
        writeln!(w, "{},{},{}", p.duration, p.m_used, p.f_max)?;
    }
    Ok(())
}

/// Bisection over `T` for the shortest duration at which `probe` reaches
/// `threshold`. Probes carry their best knots so neighbouring durations can
/// warm-start from them.
fn bisect_duration<P>(
    threshold: f64,
    bracket: (f64, f64),
    resolution: f64,
    mut probe: P,
) -> Result<(f64, Vec<ScanPoint>)>
where
    P: FnMut(f64, Option<&ControlProtocol>) -> Result<(ScanPoint, ControlProtocol)>,
{
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo && resolution > 0.0) {
        return Err(Error::validation(format!(
            "bad bracket [{lo}, {hi}] or resolution {resolution}"
        )));
    }
    let mut scan = Vec::new();
    let (p_lo, _) = probe(lo, None)?;
    scan.push(p_lo);
    if p_lo.f_max >= threshold {
        return Ok((lo, scan));
    }
    let (p_hi, mut hi_protocol) = probe(hi, None)?;
    scan.push(p_hi);
    if p_hi.f_max < threshold {
        return Err(Error::Bracket {
            threshold,
            lo,
            hi,
            f_lo: p_lo.f_max,
            f_hi: p_hi.f_max,
        });
    }
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        let (p, protocol) = probe(mid, Some(&hi_protocol))?;
        scan.push(p);
        if p.f_max >= threshold {
            hi = mid;
            hi_protocol = protocol;
        } else {
            lo = mid;
        }
    }
    scan.sort_by(|a, b| a.duration.total_cmp(&b.duration));
    Ok((hi, scan))
}

/// Shortest `T` (to `resolution`) at which [`optimize_at`] with `m` knots
/// reaches `threshold`.
pub fn min_duration_for(
    problem: &ControlProblem,
    m: usize,
    threshold: f64,
    bracket: (f64, f64),
    resolution: f64,
    opts: &OptimizeOptions,
) -> Result<QslEstimate> {
    let range = problem.scenario.range;
    let (t, scan) = bisect_duration(threshold, bracket, resolution, |duration, warm| {
        let warm_knots = warm
            .map(|w| w.resampled(m).map(|p| p.knots().to_vec()))
            .transpose()?;
        let o = optimize_at(problem, duration, m, opts, warm_knots.as_deref())?;
        Ok((
            ScanPoint {
                duration,
                m_used: m,
                f_max: o.best_fidelity,
            },
            o.protocol(range)?,
        ))
    })?;
    Ok(QslEstimate {
        t_qsl: t,
        threshold,
        scan,
        resolution,
    })
}

/// Speed-limit estimate: bisection on `T` with [`escalate_m`] at every
/// probed duration.
pub fn estimate_qsl(
    problem: &ControlProblem,
    threshold: f64,
    bracket: (f64, f64),
    resolution: f64,
    esc: &EscalationOptions,
    opts: &OptimizeOptions,
) -> Result<QslEstimate> {
    let range = problem.scenario.range;
    let esc = EscalationOptions {
        stop_at: Some(esc.stop_at.unwrap_or(threshold)),
        ..esc.clone()
    };
    let (t, scan) = bisect_duration(threshold, bracket, resolution, |duration, warm| {
        let e = escalate_m(problem, duration, &esc, opts, warm)?;
        Ok((
            ScanPoint {
                duration,
                m_used: e.m_used,
                f_max: e.f_max,
            },
            e.best.protocol(range)?,
        ))
    })?;
    Ok(QslEstimate {
        t_qsl: t,
        threshold,
        scan,
        resolution,
    })
}

/// Re-propagates fixed knots under a model with larger cutoffs.
pub fn reevaluate_protocol(
    protocol: &ControlProtocol,
    scenario: &Scenario,
    alternative: ModelSpec,
    tol: Tolerances,
    n_samples: usize,
    cache_dir: Option<&std::path::Path>,
) -> Result<Trajectory> {
    check_cutoffs(&scenario.model, &alternative)?;
    let alt = Scenario {
        model: alternative,
        ..scenario.clone()
    };
    ControlProblem::new(&alt, tol, cache_dir)?.trajectory(protocol, n_samples)
}

/// Errors unless `alternative` is the same family with cutoffs no smaller.
pub fn check_cutoffs(original: &ModelSpec, alternative: &ModelSpec) -> Result<()> {
    let smaller = |what: &str, a: usize, b: usize| {
        Err(Error::validation(format!(
            "alternative {what} = {b} smaller than original {a}"
        )))
    };
    match (original, alternative) {
        (ModelSpec::TwoQubit(_), ModelSpec::TwoQubit(_)) => Ok(()),
        (ModelSpec::TwoComponent(a), ModelSpec::TwoComponent(b)) => {
            if b.cutoff_c < a.cutoff_c {
                return smaller("C", a.cutoff_c, b.cutoff_c);
            }
            Ok(())
        }
        (ModelSpec::ThreeComponent(a), ModelSpec::ThreeComponent(b)) => {
            if b.base.cutoff_c < a.base.cutoff_c {
                return smaller("C", a.base.cutoff_c, b.base.cutoff_c);
            }
            if b.cutoff_k < a.cutoff_k {
                return smaller("K", a.cutoff_k, b.cutoff_k);
            }
            Ok(())
        }
        _ => Err(Error::validation(
            "alternative model must belong to the same family",
        )),
    }
}

/// `|<tar|ini>|^2`, the fidelity reached by keeping `g = g1`.
pub fn baseline_fidelity(problem: &ControlProblem) -> Result<f64> {
    match &problem.evaluator {
        FidelityEvaluator::Pure(t) => fidelity_pure(&problem.ini, t),
        FidelityEvaluator::Reduced { .. } => Ok(problem.initial_fidelity()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FermionModelParams, TwoQubitParams};
    use approx::assert_abs_diff_eq;

    fn qubit_scenario(lo: f64, hi: f64) -> Scenario {
        Scenario::new(
            ModelSpec::TwoQubit(TwoQubitParams::default()),
            0.0,
            4.0,
            RangeScenario::new(lo, hi).unwrap(),
            0.99,
        )
        .unwrap()
    }

    fn qubit_problem(lo: f64, hi: f64) -> ControlProblem {
        ControlProblem::new(&qubit_scenario(lo, hi), Tolerances::default(), None).unwrap()
    }

    fn fast_opts(n_restarts: usize) -> OptimizeOptions {
        OptimizeOptions {
            n_restarts,
            n_samples: 11,
            ..Default::default()
        }
    }

    #[test]
    fn bfgs_solves_a_one_dimensional_quadratic() {
        let f = |u: &[f64]| Ok((u[0] - 1.0).powi(2));
        let g = |u: &[f64]| Ok(vec![2.0 * (u[0] - 1.0)]);
        let r = bfgs_minimize(f, g, &[5.0], &BfgsOptions::default()).unwrap();
        assert_abs_diff_eq!(r.u[0], 1.0, epsilon = 1e-8);
        assert!(r.iterations <= 10);
    }

    #[test]
    fn bfgs_solves_rosenbrock() {
        let f = |u: &[f64]| Ok(100.0 * (u[1] - u[0] * u[0]).powi(2) + (1.0 - u[0]).powi(2));
        let g = |u: &[f64]| {
            Ok(vec![
                -400.0 * u[0] * (u[1] - u[0] * u[0]) - 2.0 * (1.0 - u[0]),
                200.0 * (u[1] - u[0] * u[0]),
            ])
        };
        let r = bfgs_minimize(f, g, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert!(!r.line_search_failed());
        assert_abs_diff_eq!(r.u[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.u[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn bfgs_handles_ill_conditioned_quadratic() {
        let diag = [1.0, 1e4, 30.0, 0.5];
        let f = |u: &[f64]| Ok(0.5 * u.iter().zip(&diag).map(|(x, d)| d * x * x).sum::<f64>());
        let g = |u: &[f64]| Ok(u.iter().zip(&diag).map(|(x, d)| d * x).collect());
        let r = bfgs_minimize(f, g, &[1.0, 1.0, -2.0, 3.0], &BfgsOptions::default()).unwrap();
        assert!(r.gradient_norm < 1e-8, "{r:?}");
        assert_eq!(r.termination, Termination::GradientTolerance);
    }

    #[test]
    fn failed_evaluations_are_rejected_steps() {
        // the objective refuses u > 2; the minimum at 1.5 is still found
        let f = |u: &[f64]| {
            if u[0] > 2.0 {
                Err(Error::Numerical("out of domain".into()))
            } else {
                Ok((u[0] - 1.5).powi(2))
            }
        };
        let g = |u: &[f64]| Ok(vec![2.0 * (u[0] - 1.5)]);
        let r = bfgs_minimize(f, g, &[-3.0], &BfgsOptions::default()).unwrap();
        assert_abs_diff_eq!(r.u[0], 1.5, epsilon = 1e-7);
    }

    #[test]
    fn fd_gradient_cases() {
        let g = gradient_fd(
            |u: &[f64]| Ok(u.iter().map(|x| x * x).sum()),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], 4.0, epsilon = 1e-8);
        let z = gradient_fd(|_: &[f64]| Ok(3.0), &[0.1, 0.2, 0.3], 1e-5).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        assert!(gradient_fd(|_: &[f64]| Ok(f64::NAN), &[0.0], 1e-5).is_err());
    }

    #[test]
    fn fd_gradient_matches_four_point_stencil_on_fidelity() {
        let problem = qubit_problem(-2.0, 2.0);
        let u = vec![0.3, -0.7, 1.1, 0.2, -0.4];
        let f = |u: &[f64]| problem.objective(u, 2.0);
        let h = 1e-5;
        let g2 = gradient_fd(f, &u, h).unwrap();
        for (i, gi) in g2.iter().enumerate() {
            let at = |d: f64| {
                let mut v = u.clone();
                v[i] += d;
                f(&v).unwrap()
            };
            let hh = 1e-3;
            let g4 = (-at(2.0 * hh) + 8.0 * at(hh) - 8.0 * at(-hh) + at(-2.0 * hh)) / (12.0 * hh);
            assert!(
                (gi - g4).abs() <= 1e-4 * g4.abs().max(1e-3),
                "coord {i}: {gi} vs {g4}"
            );
        }
    }

    #[test]
    fn objective_at_zero_knots_is_one_minus_overlap() {
        let problem = qubit_problem(-2.0, 2.0);
        // u = 0 maps to the midpoint 0 of [-2, 2]
        let v = problem.objective(&[0.0; 4], 3.0).unwrap();
        assert_abs_diff_eq!(v, 1.0 - 0.7815, epsilon = 5e-4);
        let w = problem.objective(&[0.0, 1e-6, 0.0, 0.0], 3.0).unwrap();
        assert!((w - v).abs() < 1e-5);
    }

    #[test]
    fn trivial_scenario_has_zero_objective() {
        let s = Scenario::new(
            ModelSpec::TwoQubit(TwoQubitParams::default()),
            1.0,
            1.0,
            RangeScenario::new(-2.0, 2.0).unwrap(),
            0.99,
        )
        .unwrap();
        let problem = ControlProblem::new(&s, Tolerances::default(), None).unwrap();
        assert!(problem.objective(&[0.4, -1.0], 1e-6).unwrap() < 1e-9);
    }

    #[test]
    fn short_single_knot_optimum_is_the_initial_overlap() {
        let problem = qubit_problem(-2.0, 2.0);
        let o = optimize_at(&problem, 1e-6, 1, &fast_opts(2), None).unwrap();
        assert_abs_diff_eq!(
            o.best_fidelity,
            baseline_fidelity(&problem).unwrap(),
            epsilon = 1e-5
        );
    }

    #[test]
    fn optimized_knots_respect_the_box_and_are_reproducible() {
        let problem = qubit_problem(0.0, 2.0);
        let opts = OptimizeOptions {
            seed: 7,
            ..fast_opts(2)
        };
        let a = optimize_at(&problem, 2.0, 4, &opts, None).unwrap();
        let b = optimize_at(&problem, 2.0, 4, &opts, None).unwrap();
        assert_eq!(a, b);
        assert!(a.knots.iter().all(|k| (0.0..=2.0).contains(k)));
        assert!(a.best_fidelity > baseline_fidelity(&problem).unwrap());
        assert_eq!(a.restarts_used, 3);
    }

    #[test]
    fn escalation_is_monotone() {
        let problem = qubit_problem(-2.0, 2.0);
        let esc = EscalationOptions {
            m_schedule: vec![1, 2, 3, 5],
            eps_m: 0.0,
            stop_at: None,
        };
        let e = escalate_m(&problem, 1.5, &esc, &fast_opts(1), None).unwrap();
        assert_eq!(e.history.len(), 4);
        let best_seen = e.history.iter().map(|h| h.1).fold(0.0, f64::max);
        assert_eq!(e.f_max, best_seen);
        let mut running = 0.0_f64;
        for (_, f) in &e.history {
            // warm start from the resampled previous best
            assert!(*f >= running - 1e-6, "{:?}", e.history);
            running = running.max(*f);
        }
    }

    #[test]
    fn shifted_scenario_is_equivalent() {
        let spec = ModelSpec::TwoQubit(TwoQubitParams::default());
        let orig =
            Scenario::new(spec, 0.3, 2.0, RangeScenario::new(-0.2, 0.8).unwrap(), 0.9).unwrap();
        let shifted =
            Scenario::new(spec, 0.0, 1.7, RangeScenario::new(-0.5, 0.5).unwrap(), 0.9).unwrap();
        let model = spec.build(None).unwrap();
        let p1 = ControlProblem::from_model(&orig, model.clone(), Tolerances::default()).unwrap();
        let p2 = ControlProblem::from_model(&shifted, model.shifted(0.3), Tolerances::default())
            .unwrap();
        let opts = OptimizeOptions {
            seed: 3,
            ..fast_opts(2)
        };
        let a = optimize_at(&p1, 1.2, 3, &opts, None).unwrap();
        let b = optimize_at(&p2, 1.2, 3, &opts, None).unwrap();
        assert!((a.best_fidelity - b.best_fidelity).abs() < 1e-6);
    }

    #[test]
    fn bracket_edges() {
        let problem = qubit_problem(-2.0, 2.0);
        // already satisfied at the lower end
        let q = min_duration_for(&problem, 2, 0.5, (0.1, 3.0), 0.01, &fast_opts(0)).unwrap();
        assert_eq!(q.t_qsl, 0.1);
        let err =
            min_duration_for(&problem, 1, 0.999, (0.1, 0.2), 0.01, &fast_opts(0)).unwrap_err();
        assert!(matches!(err, Error::Bracket { .. }));
    }

    #[test]
    fn reevaluation_rejects_smaller_cutoffs() {
        let base = ModelSpec::TwoComponent(FermionModelParams {
            mass_ratio: 40.0 / 6.0,
            cutoff_c: 4,
        });
        let s = Scenario::new(base, 0.0, 1.0, RangeScenario::new(-0.5, 0.5).unwrap(), 0.9).unwrap();
        let p = ControlProtocol::new(1.0, vec![0.1, 0.2], s.range).unwrap();
        let smaller = ModelSpec::TwoComponent(FermionModelParams {
            mass_ratio: 40.0 / 6.0,
            cutoff_c: 3,
        });
        assert!(reevaluate_protocol(&p, &s, smaller, Tolerances::default(), 2, None).is_err());
        let same = reevaluate_protocol(&p, &s, base, Tolerances::default(), 2, None).unwrap();
        let direct = ControlProblem::new(&s, Tolerances::default(), None)
            .unwrap()
            .fidelity(&p)
            .unwrap();
        assert_eq!(same.final_fidelity(), direct);
    }

    #[test]
    fn outcome_record_round_trip() {
        let problem = qubit_problem(-2.0, 2.0);
        let o = optimize_at(&problem, 1.0, 2, &fast_opts(0), None).unwrap();
        let rec = o.to_record(problem.scenario(), 11);
        let json = serde_json::to_string(&rec).unwrap();
        for key in [
            "\"scenario\"",
            "\"T\"",
            "\"M\"",
            "\"best_fidelity\"",
            "\"knots\"",
            "\"seed\"",
            "\"iterations\"",
            "\"gradient_norm\"",
        ] {
            assert!(json.contains(key), "{key} missing from {json}");
        }
        let back: OutcomeRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        back.validate().unwrap();
    }

    #[test]
    fn scan_csv_layout() {
        let scan = [ScanPoint {
            duration: 1.5,
            m_used: 3,
            f_max: 0.9,
        }];
        let mut buf = Vec::new();
        write_scan_csv(&scan, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "T,M_used,F_max\n1.5,3,0.9\n"
        );
    }
}
