//! Time-dependent Schrödinger propagation under `H(g(t)) = H0 + g(t) Hc`.
//!
//! Dormand–Prince 5(4) with step-size control and Hairer's continuous
//! extension for sampling. The field is evaluated at every stage time.

use std::borrow::Cow;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::control::ControlProtocol;
use crate::error::{Error, Result};
use crate::linalg::{eigh, inner, reduced_overlap, StateVector};
use crate::models::ModelInstance;

/// Integrator tolerances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    /// A run whose norm leaves `1 ± max_norm_drift` is rejected.
    pub max_norm_drift: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
            max_norm_drift: 1e-8,
            max_steps: 5_000_000,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.rtol < 1.0) {
            return Err(Error::validation(format!(
                "bad tolerances rtol={} atol={}",
                self.rtol, self.atol
            )));
        }
        if !(self.max_norm_drift > 0.0) || self.max_steps == 0 {
            return Err(Error::validation(
                "max_norm_drift and max_steps must be positive",
            ));
        }
        Ok(())
    }
}

/// Which fidelity the objective reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityMode {
    /// `|<tar|psi>|^2`.
    Pure,
    /// `<tar|Tr_last(|psi><psi|)|tar>^2`.
    Reduced,
}

/// Maps a propagated state to a fidelity.
#[derive(Clone, Debug)]
pub enum FidelityEvaluator {
    Pure(StateVector),
    Reduced {
        target: StateVector,
        traced_dim: usize,
    },
}

impl FidelityEvaluator {
    pub fn new(mode: FidelityMode, target: StateVector, model: &ModelInstance) -> Result<Self> {
        match mode {
            FidelityMode::Pure => {
                if target.dim() != model.dim() {
                    return Err(Error::validation(format!(
                        "target dim {} != model dim {}",
                        target.dim(),
                        model.dim()
                    )));
                }
                Ok(FidelityEvaluator::Pure(target))
            }
            FidelityMode::Reduced => {
                let traced_dim = *model.subsystem_dims.last().unwrap_or(&1);
                if target.dim() * traced_dim != model.dim() {
                    return Err(Error::validation(format!(
                        "target dim {} times traced dim {traced_dim} != model dim {}",
                        target.dim(),
                        model.dim()
                    )));
                }
                Ok(FidelityEvaluator::Reduced { target, traced_dim })
            }
        }
    }

    /// State dimension this evaluator accepts.
    pub fn state_dim(&self) -> usize {
        match self {
            FidelityEvaluator::Pure(t) => t.dim(),
            FidelityEvaluator::Reduced { target, traced_dim } => target.dim() * traced_dim,
        }
    }

    pub fn evaluate(&self, psi: ArrayView1<C64>) -> f64 {
        match self {
            FidelityEvaluator::Pure(t) => inner(t.amplitudes().view(), psi).norm_sqr(),
            FidelityEvaluator::Reduced { target, traced_dim } => {
                let o = reduced_overlap(psi, target.amplitudes().view(), *traced_dim);
                o * o
            }
        }
    }
}

/// Sampled evolution of one protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Field at each sample time.
    pub fields: Vec<f64>,
    pub fidelities: Vec<f64>,
    /// Final state as integrated (not renormalized).
    pub final_state: StateVector,
    /// Largest `| ||psi|| - 1 |` over the accepted integrator steps.
    pub norm_drift: f64,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
}

impl Trajectory {
    pub fn final_fidelity(&self) -> f64 {
        *self
            .fidelities
            .last()
            .expect("trajectory has at least two samples")
    }

    /// CSV with header `t,g,F`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,g,F")?;
        for ((t, g), f) in self.times.iter().zip(&self.fields).zip(&self.fidelities) {
            writeln!(w, "{t},{g},{f}")?;
        }
        Ok(())
    }
}

/// `H(g) = D + R(g)` with `D` the real diagonal of `H0` and
/// `R(g) = (H0 - D) + g Hc` stored in compressed rows.
///
/// The integrated variable is the interaction-picture state
/// `phi = exp(i D t) psi`, so `dphi/dt = -i exp(i D t) R(g) exp(-i D t) phi`.
/// The fast diagonal phases are applied exactly and only the couplings are
/// left to the integrator.
#[derive(Clone, Debug)]
struct Generator {
    dim: usize,
    /// Full-basis index of each integrated component, ascending.
    active: Vec<usize>,
    full_dim: usize,
    /// Distinct diagonal energies and the level index of each basis state.
    levels: Vec<f64>,
    level_of: Vec<u32>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    values: Couplings,
}

#[derive(Clone, Debug)]
enum Couplings {
    /// `H0` is diagonal: only `g Hc` remains.
    ControlOnly(Vec<f64>),
    /// Real `(H0 - D, Hc)` pairs.
    Real(Vec<[f64; 2]>),
    /// `(Re, Im)` of `H0 - D` then of `Hc`.
    Complex(Vec<[f64; 4]>),
}

impl Generator {
    fn new(h0: &Array2<C64>, hc: &Array2<C64>) -> Self {
        let dim = h0.nrows();
        let zero = C64::new(0.0, 0.0);
        let complex = h0.iter().chain(hc.iter()).any(|z| z.im != 0.0);
        let drift_diagonal = (0..dim).all(|r| (0..dim).all(|c| r == c || h0[[r, c]] == zero));

        let mut levels: Vec<f64> = (0..dim).map(|r| h0[[r, r]].re).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let level_of = (0..dim)
            .map(|r| {
                levels
                    .binary_search_by(|e| e.total_cmp(&h0[[r, r]].re))
                    .expect("level present") as u32
            })
            .collect();

        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let (mut only, mut real, mut cplx) = (Vec::new(), Vec::new(), Vec::new());
        row_ptr.push(0);
        for r in 0..dim {
            for c in 0..dim {
                let a = if r == c {
                    C64::new(0.0, h0[[r, c]].im)
                } else {
                    h0[[r, c]]
                };
                let b = hc[[r, c]];
                if a == zero && b == zero {
                    continue;
                }
                cols.push(c as u32);
                if complex {
                    cplx.push([a.re, a.im, b.re, b.im]);
                } else if drift_diagonal {
                    only.push(b.re);
                } else {
                    real.push([a.re, b.re]);
                }
            }
            row_ptr.push(cols.len());
        }
        let values = if complex {
            Couplings::Complex(cplx)
        } else if drift_diagonal {
            Couplings::ControlOnly(only)
        } else {
            Couplings::Real(real)
        };
        Self {
            dim,
            active: (0..dim).collect(),
            full_dim: dim,
            levels,
            level_of,
            row_ptr,
            cols,
            values,
        }
    }

    /// Connected components of the coupling graph.
    fn components(&self) -> Vec<usize> {
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut parent: Vec<usize> = (0..self.dim).collect();
        for r in 0..self.dim {
            for &c in &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]] {
                let (a, b) = (find(&mut parent, r), find(&mut parent, c as usize));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..self.dim).map(|i| find(&mut parent, i)).collect()
    }

    /// The same generator on a union of components (closed under coupling).
    fn restrict(&self, keep: &[bool]) -> Generator {
        let active: Vec<usize> = (0..self.dim).filter(|&i| keep[i]).collect();
        let mut new_index = vec![u32::MAX; self.dim];
        for (k, &i) in active.iter().enumerate() {
            new_index[i] = k as u32;
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut entries = Vec::new();
        for &r in &active {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                cols.push(new_index[self.cols[k] as usize]);
                entries.push(k);
            }
            row_ptr.push(cols.len());
        }
        let values = match &self.values {
            Couplings::ControlOnly(v) => {
                Couplings::ControlOnly(entries.iter().map(|&k| v[k]).collect())
            }
            Couplings::Real(v) => Couplings::Real(entries.iter().map(|&k| v[k]).collect()),
            Couplings::Complex(v) => Couplings::Complex(entries.iter().map(|&k| v[k]).collect()),
        };
        Generator {
            dim: active.len(),
            level_of: active.iter().map(|&i| self.level_of[i]).collect(),
            active,
            full_dim: self.full_dim,
            levels: self.levels.clone(),
            row_ptr,
            cols,
            values,
        }
    }

    /// Right-hand side at time `t` with `y` holding `(Re, Im)` pairs of
    /// `phi`. `scratch` holds `2 (dim + levels)` values.
    fn rhs(&self, t: f64, g: f64, y: &[f64], dy: &mut [f64], scratch: &mut [f64]) {
        let n = self.dim;
        let (phases, z) = scratch.split_at_mut(2 * self.levels.len());
        for (p, e) in phases.chunks_exact_mut(2).zip(&self.levels) {
            let (s, c) = (e * t).sin_cos();
            p[0] = c;
            p[1] = s;
        }
        // z = exp(-i D t) phi
        for m in 0..n {
            let l = 2 * self.level_of[m] as usize;
            let (c, s) = (phases[l], phases[l + 1]);
            let (re, im) = (y[2 * m], y[2 * m + 1]);
            z[2 * m] = c * re + s * im;
            z[2 * m + 1] = c * im - s * re;
        }
        for r in 0..n {
            let range = self.row_ptr[r]..self.row_ptr[r + 1];
            let cols = &self.cols[range.clone()];
            // w = R(g) z
            let (wr, wi) = match &self.values {
                Couplings::ControlOnly(v) => {
                    let (mut wr, mut wi) = (0.0, 0.0);
                    for (&c, &h) in cols.iter().zip(&v[range]) {
                        let c = 2 * c as usize;
                        wr += h * z[c];
                        wi += h * z[c + 1];
                    }
                    (g * wr, g * wi)
                }
                Couplings::Real(v) => {
                    let (mut wr, mut wi) = (0.0, 0.0);
                    for (&c, &[a, b]) in cols.iter().zip(&v[range]) {
                        let c = 2 * c as usize;
                        let h = a + g * b;
                        wr += h * z[c];
                        wi += h * z[c + 1];
                    }
                    (wr, wi)
                }
                Couplings::Complex(v) => {
                    let (mut wr, mut wi) = (0.0, 0.0);
                    for (&c, &[ar, ai, br, bi]) in cols.iter().zip(&v[range]) {
                        let c = 2 * c as usize;
                        let (hr, hi) = (ar + g * br, ai + g * bi);
                        wr += hr * z[c] - hi * z[c + 1];
                        wi += hr * z[c + 1] + hi * z[c];
                    }
                    (wr, wi)
                }
            };
            // dphi = -i exp(i D t) w
            let l = 2 * self.level_of[r] as usize;
            let (c, s) = (phases[l], phases[l + 1]);
            dy[2 * r] = c * wi + s * wr;
            dy[2 * r + 1] = -(c * wr - s * wi);
        }
    }

    fn scratch_len(&self) -> usize {
        2 * (self.dim + self.levels.len())
    }

    /// Back to the Schrödinger picture on the full basis.
    fn to_complex(&self, y: &[f64], t: f64) -> Array1<C64> {
        let mut out = Array1::zeros(self.full_dim);
        for (k, &i) in self.active.iter().enumerate() {
            let e = self.levels[self.level_of[k] as usize];
            out[i] = C64::new(y[2 * k], y[2 * k + 1]) * C64::from_polar(1.0, -e * t);
        }
        out
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Reusable propagator for one model; build once, propagate many protocols.
#[derive(Clone, Debug)]
pub struct Propagator {
    gen: Generator,
    /// Eigenvectors of `H0` (columns) when integrating in that basis.
    basis: Option<Array2<C64>>,
    component: Vec<usize>,
    tol: Tolerances,
}

/// Models up to this size with a non-diagonal drift are integrated in the
/// drift eigenbasis, where the free evolution is exact.
const DRIFT_EIGENBASIS_MAX_DIM: usize = 256;

impl Propagator {
    pub fn new(model: &ModelInstance, tol: Tolerances) -> Result<Self> {
        tol.validate()?;
        let h0 = model.h0.entries();
        let hc = model.hc.entries();
        let dim = model.dim();
        let diagonal =
            (0..dim).all(|r| (0..dim).all(|c| r == c || h0[[r, c]] == C64::new(0.0, 0.0)));
        let (gen, basis) = if !diagonal && dim <= DRIFT_EIGENBASIS_MAX_DIM {
            let spec = eigh(&model.h0)?;
            let mut v = Array2::zeros((dim, dim));
            for (k, s) in spec.states.iter().enumerate() {
                v.column_mut(k).assign(s.amplitudes());
            }
            let d = Array2::from_diag(
                &spec
                    .energies
                    .iter()
                    .map(|&e| C64::new(e, 0.0))
                    .collect::<Array1<C64>>(),
            );
            let vh = v.t().mapv(|z| z.conj());
            let mut hc_rot = vh.dot(hc).dot(&v);
            // exact Hermitian symmetry after the rotation
            for r in 0..dim {
                hc_rot[[r, r]].im = 0.0;
                for c in 0..r {
                    hc_rot[[c, r]] = hc_rot[[r, c]].conj();
                }
            }
            (Generator::new(&d, &hc_rot), Some(v))
        } else {
            (Generator::new(h0, hc), None)
        };
        let component = gen.components();
        Ok(Self {
            gen,
            basis,
            component,
            tol,
        })
    }

    pub fn dim(&self) -> usize {
        self.gen.dim
    }

    /// Amplitudes outside the components touched by `psi0` stay exactly
    /// zero, so only those components are integrated.
    fn sector(&self, psi0: &Array1<C64>) -> Cow<'_, Generator> {
        let mut touched = vec![false; self.gen.dim];
        for (i, a) in psi0.iter().enumerate() {
            if *a != C64::new(0.0, 0.0) {
                touched[self.component[i]] = true;
            }
        }
        let keep: Vec<bool> = self.component.iter().map(|&c| touched[c]).collect();
        if keep.iter().all(|&k| k) {
            Cow::Borrowed(&self.gen)
        } else {
            Cow::Owned(self.gen.restrict(&keep))
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    pub fn propagate(
        &self,
        protocol: &ControlProtocol,
        psi0: &StateVector,
        n_samples: usize,
        evaluator: &FidelityEvaluator,
    ) -> Result<Trajectory> {
        let n = self.gen.dim;
        if psi0.dim() != n || evaluator.state_dim() != n {
            return Err(Error::validation(format!(
                "state dim {} / evaluator dim {} do not match model dim {n}",
                psi0.dim(),
                evaluator.state_dim()
            )));
        }
        if n_samples < 2 {
            return Err(Error::validation("need at least two samples"));
        }
        let t_end = protocol.duration();
        let field = |t: f64| protocol.field_unchecked(t.clamp(0.0, t_end));
        let samples: Vec<f64> = (0..n_samples)
            .map(|j| {
                if j == n_samples - 1 {
                    t_end
                } else {
                    t_end * j as f64 / (n_samples - 1) as f64
                }
            })
            .collect();

        let amps = match &self.basis {
            Some(v) => v.t().mapv(|z| z.conj()).dot(psi0.amplitudes()),
            None => psi0.amplitudes().clone(),
        };
        let gen = self.sector(&amps);
        let gen = gen.as_ref();
        let m = 2 * gen.dim;
        let mut y: Vec<f64> = gen
            .active
            .iter()
            .flat_map(|&i| [amps[i].re, amps[i].im])
            .collect();
        let mut k1 = vec![0.0; m];
        let mut k2 = vec![0.0; m];
        let mut k3 = vec![0.0; m];
        let mut k4 = vec![0.0; m];
        let mut k5 = vec![0.0; m];
        let mut k6 = vec![0.0; m];
        let mut k7 = vec![0.0; m];
        let mut ys = vec![0.0; m];
        let mut y1 = vec![0.0; m];
        let mut dense = vec![0.0; m];
        let mut scratch = vec![0.0; gen.scratch_len()];

        let mut out = Recorder::new(gen, self.basis.as_ref(), evaluator, &field, n_samples);
        out.track(&y);
        out.record(0.0, &y);
        let mut next_sample = 1;

        let tol = &self.tol;
        let sk = |a: f64, b: f64| tol.atol + tol.rtol * a.max(b);
        let mut t = 0.0;
        gen.rhs(0.0, field(0.0), &y, &mut k1, &mut scratch);
        let mut h = self.initial_step(gen, &y, &k1, t_end, &field, &mut ys, &mut k2);
        let mut accepted = 0usize;
        let mut rejected = 0usize;
        let mut last_rejected = false;
        // land exactly on clamp kinks so no step straddles one
        let mut stops = Vec::new();
        for b in protocol.clamp_breakpoints() {
            let gap = 1e-10 * t_end;
            if b > gap && b < t_end - gap && stops.last().is_none_or(|&p: &f64| b - p > gap) {
                stops.push(b);
            }
        }
        stops.push(t_end);
        let mut stop_idx = 0;

        while t < t_end {
            if accepted + rejected >= tol.max_steps {
                return Err(Error::Integration {
                    time: t,
                    reason: format!("exceeded {} steps", tol.max_steps),
                });
            }
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(Error::Integration {
                    time: t,
                    reason: format!("step size underflow (h = {h:e})"),
                });
            }
            let stop = stops[stop_idx];
            let last = t + h >= stop;
            if last {
                h = stop - t;
            }

            for i in 0..m {
                ys[i] = y[i] + h * A21 * k1[i];
            }
            gen.rhs(t + C2 * h, field(t + C2 * h), &ys, &mut k2, &mut scratch);
            for i in 0..m {
                ys[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            gen.rhs(t + C3 * h, field(t + C3 * h), &ys, &mut k3, &mut scratch);
            for i in 0..m {
                ys[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            gen.rhs(t + C4 * h, field(t + C4 * h), &ys, &mut k4, &mut scratch);
            for i in 0..m {
                ys[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            gen.rhs(t + C5 * h, field(t + C5 * h), &ys, &mut k5, &mut scratch);
            for i in 0..m {
                ys[i] = y[i]
                    + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            let t_new = if last { stop } else { t + h };
            gen.rhs(t_new, field(t_new), &ys, &mut k6, &mut scratch);
            for i in 0..m {
                y1[i] = y[i]
                    + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            gen.rhs(t_new, field(t_new), &y1, &mut k7, &mut scratch);

            // max over amplitudes of |error| / (atol + rtol |psi|)
            let mut err = 0.0_f64;
            for i in 0..gen.dim {
                let (er, ei) = (2 * i, 2 * i + 1);
                let e_re = h
                    * (E1 * k1[er]
                        + E3 * k3[er]
                        + E4 * k4[er]
                        + E5 * k5[er]
                        + E6 * k6[er]
                        + E7 * k7[er]);
                let e_im = h
                    * (E1 * k1[ei]
                        + E3 * k3[ei]
                        + E4 * k4[ei]
                        + E5 * k5[ei]
                        + E6 * k6[ei]
                        + E7 * k7[ei]);
                let a0 = y[er].hypot(y[ei]);
                let a1 = y1[er].hypot(y1[ei]);
                err = err.max(e_re.hypot(e_im) / sk(a0, a1));
            }
            if !err.is_finite() {
                return Err(Error::Integration {
                    time: t,
                    reason: "non-finite error estimate".into(),
                });
            }

            let mut fac = if err == 0.0 {
                10.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
            };
            if err <= 1.0 {
                // sample inside (t, t_new]
                let mut have_dense = false;
                while next_sample < n_samples && samples[next_sample] <= t_new {
                    let s = samples[next_sample];
                    if s == t_new {
                        out.record(s, &y1);
                    } else {
                        if !have_dense {
                            for i in 0..m {
                                dense[i] = h
                                    * (D1 * k1[i]
                                        + D3 * k3[i]
                                        + D4 * k4[i]
                                        + D5 * k5[i]
                                        + D6 * k6[i]
                                        + D7 * k7[i]);
                            }
                            have_dense = true;
                        }
                        let theta = (s - t) / h;
                        let theta1 = 1.0 - theta;
                        for i in 0..m {
                            let r2 = y1[i] - y[i];
                            let r3 = h * k1[i] - r2;
                            let r4 = r2 - h * k7[i] - r3;
                            ys[i] = y[i]
                                + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * dense[i])));
                        }
                        out.record(s, &ys);
                    }
                    next_sample += 1;
                }
                std::mem::swap(&mut y, &mut y1);
                std::mem::swap(&mut k1, &mut k7);
                out.track(&y);
                t = t_new;
                if last {
                    stop_idx += 1;
                }
                accepted += 1;
                if last_rejected {
                    fac = fac.min(1.0);
                }
                last_rejected = false;
            } else {
                rejected += 1;
                last_rejected = true;
            }
            h *= fac;
        }
        while next_sample < n_samples {
            out.record(samples[next_sample], &y);
            next_sample += 1;
        }

        let final_state = StateVector::from_raw(out.state(&y, t_end));
        let traj = out.finish(final_state, accepted, rejected);
        if traj.norm_drift >= tol.max_norm_drift {
            return Err(Error::Integration {
                time: t_end,
                reason: format!(
                    "norm drift {:e} exceeds {:e}",
                    traj.norm_drift, tol.max_norm_drift
                ),
            });
        }
        Ok(traj)
    }

    /// Hairer's starting-step heuristic.
    #[allow(clippy::too_many_arguments)]
    fn initial_step(
        &self,
        gen: &Generator,
        y0: &[f64],
        f0: &[f64],
        t_end: f64,
        field: &dyn Fn(f64) -> f64,
        y1: &mut [f64],
        f1: &mut [f64],
    ) -> f64 {
        let tol = &self.tol;
        let m = y0.len() as f64;
        let sk: Vec<f64> = y0.iter().map(|v| tol.atol + tol.rtol * v.abs()).collect();
        let rms =
            |v: &[f64]| (v.iter().zip(&sk).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / m).sqrt();
        let d0 = rms(y0);
        let d1 = rms(f0);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let h0 = h0.min(t_end);
        for i in 0..y0.len() {
            y1[i] = y0[i] + h0 * f0[i];
        }
        let mut scratch = vec![0.0; gen.scratch_len()];
        gen.rhs(h0, field(h0), y1, f1, &mut scratch);
        let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
        let d2 = rms(&diff) / h0;
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dm).powf(0.2)
        };
        (100.0 * h0).min(h1).min(t_end)
    }
}

struct Recorder<'a> {
    gen: &'a Generator,
    basis: Option<&'a Array2<C64>>,
    evaluator: &'a FidelityEvaluator,
    field: &'a dyn Fn(f64) -> f64,
    times: Vec<f64>,
    fields: Vec<f64>,
    fidelities: Vec<f64>,
    norm_drift: f64,
}

impl<'a> Recorder<'a> {
    fn new(
        gen: &'a Generator,
        basis: Option<&'a Array2<C64>>,
        evaluator: &'a FidelityEvaluator,
        field: &'a dyn Fn(f64) -> f64,
        n: usize,
    ) -> Self {
        Self {
            gen,
            basis,
            evaluator,
            field,
            times: Vec::with_capacity(n),
            fields: Vec::with_capacity(n),
            fidelities: Vec::with_capacity(n),
            norm_drift: 0.0,
        }
    }

    /// Norm check on an integrator state. Dense-output samples are not
    /// tracked: the interpolant is one order less accurate than the steps.
    fn track(&mut self, y: &[f64]) {
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.norm_drift = self.norm_drift.max((norm - 1.0).abs());
    }

    fn record(&mut self, t: f64, y: &[f64]) {
        let psi = self.state(y, t);
        self.times.push(t);
        self.fields.push((self.field)(t));
        self.fidelities
            .push(self.evaluator.evaluate(psi.view()).clamp(0.0, 1.0));
    }

    /// Schrödinger-picture state in the model basis.
    fn state(&self, y: &[f64], t: f64) -> Array1<C64> {
        let psi = self.gen.to_complex(y, t);
        match self.basis {
            Some(v) => v.dot(&psi),
            None => psi,
        }
    }

    fn finish(
        self,
        final_state: StateVector,
        steps_accepted: usize,
        steps_rejected: usize,
    ) -> Trajectory {
        Trajectory {
            times: self.times,
            fields: self.fields,
            fidelities: self.fidelities,
            final_state,
            norm_drift: self.norm_drift,
            steps_accepted,
            steps_rejected,
        }
    }
}

/// One-shot propagation with default tolerances.
pub fn propagate(
    model: &ModelInstance,
    protocol: &ControlProtocol,
    psi0: &StateVector,
    n_samples: usize,
    evaluator: &FidelityEvaluator,
) -> Result<Trajectory> {
    Propagator::new(model, Tolerances::default())?.propagate(protocol, psi0, n_samples, evaluator)
}

/// Fidelity at `t = T`.
pub fn final_fidelity(
    model: &ModelInstance,
    protocol: &ControlProtocol,
    ini: &StateVector,
    tar: &StateVector,
    mode: FidelityMode,
) -> Result<f64> {
    let eval = FidelityEvaluator::new(mode, tar.clone(), model)?;
    Ok(propagate(model, protocol, ini, 2, &eval)?.final_fidelity())
}
