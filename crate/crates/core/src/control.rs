//! Bounded, spline-interpolated control fields.
//!
//! A protocol of duration `T` with `M` knots places them at
//! `t_m = m T / (M - 1)` (both endpoints included). The field is the
//! not-a-knot cubic spline through the knots, hard-clamped to the accessible
//! range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accessible interval `[g_min, g_max]` of the control field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct RangeScenario {
    g_min: f64,
    g_max: f64,
}

impl RangeScenario {
    pub fn new(g_min: f64, g_max: f64) -> Result<Self> {
        if !(g_min.is_finite() && g_max.is_finite() && g_min < g_max) {
            return Err(Error::validation(format!(
                "invalid range [{g_min}, {g_max}]: need g_min < g_max"
            )));
        }
        Ok(Self { g_min, g_max })
    }

    pub fn g_min(&self) -> f64 {
        self.g_min
    }

    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    pub fn width(&self) -> f64 {
        self.g_max - self.g_min
    }

    pub fn contains(&self, g: f64) -> bool {
        g >= self.g_min && g <= self.g_max
    }

    pub fn clamp(&self, g: f64) -> f64 {
        g.clamp(self.g_min, self.g_max)
    }

    pub fn shifted(&self, by: f64) -> RangeScenario {
        RangeScenario {
            g_min: self.g_min + by,
            g_max: self.g_max + by,
        }
    }
}

impl TryFrom<[f64; 2]> for RangeScenario {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        RangeScenario::new(v[0], v[1])
    }
}

impl From<RangeScenario> for [f64; 2] {
    fn from(r: RangeScenario) -> Self {
        [r.g_min, r.g_max]
    }
}

/// Cubic spline through `(x_i, y_i)` with not-a-knot ends, stored as
/// second derivatives at the nodes. Two points give the line, three the
/// interpolating parabola.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn not_a_knot(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::validation(
                "spline needs matching, non-empty node arrays",
            ));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation(
                "spline nodes must be strictly increasing",
            ));
        }
        let m = match n {
            1 | 2 => vec![0.0; n],
            3 => {
                let (h0, h1) = (x[1] - x[0], x[2] - x[1]);
                let curv = 2.0 * ((y[2] - y[1]) / h1 - (y[1] - y[0]) / h0) / (h0 + h1);
                vec![curv; 3]
            }
            _ => not_a_knot_moments(x, y),
        };
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if n == 1 {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        // segment i with x_i <= t < x_{i+1}; extrapolates from the first piece
        let i = self.x.partition_point(|&xi| xi <= t).saturating_sub(1);
        let h = self.x[i + 1] - self.x[i];
        let a = self.x[i + 1] - t;
        let b = t - self.x[i];
        // exact at the left node: the cubic corrections vanish there
        self.y[i]
            + (self.y[i + 1] - self.y[i]) * (b / h)
            + (self.m[i] * a * (a * a - h * h) + self.m[i + 1] * b * (b * b - h * h)) / (6.0 * h)
    }
}

impl CubicSpline {
    /// Times in `(x_0, x_{n-1})` where the spline crosses `level`, found by
    /// scanning each segment and bisecting sign changes.
    fn crossings(&self, level: f64) -> Vec<f64> {
        const SCAN: usize = 32;
        let mut out = Vec::new();
        for w in self.x.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mut t0 = a;
            let mut f0 = self.eval(a) - level;
            for j in 1..=SCAN {
                let t1 = if j == SCAN {
                    b
                } else {
                    a + (b - a) * j as f64 / SCAN as f64
                };
                let f1 = self.eval(t1) - level;
                if f1 == 0.0 {
                    out.push(t1);
                } else if f0 != 0.0 && f0.signum() != f1.signum() {
                    let (mut lo, mut hi, mut flo) = (t0, t1, f0);
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if mid <= lo || mid >= hi {
                            break;
                        }
                        let fm = self.eval(mid) - level;
                        if fm.signum() == flo.signum() {
                            lo = mid;
                            flo = fm;
                        } else {
                            hi = mid;
                        }
                    }
                    out.push(0.5 * (lo + hi));
                }
                t0 = t1;
                f0 = f1;
            }
        }
        out
    }
}

/// Second derivatives for `n >= 4` nodes. The end moments are eliminated
/// with the third-derivative continuity conditions at `x_1` and `x_{n-2}`,
/// leaving a tridiagonal system in `M_1 .. M_{n-2}`.
fn not_a_knot_moments(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let k = n - 2;
    let mut sub = vec![0.0; k];
    let mut diag = vec![0.0; k];
    let mut sup = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for r in 0..k {
        let i = r + 1;
        sub[r] = h[i - 1];
        diag[r] = 2.0 * (h[i - 1] + h[i]);
        sup[r] = h[i];
        rhs[r] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
    }
    // M_0 = (1 + h0/h1) M_1 - (h0/h1) M_2
    let (h0, h1) = (h[0], h[1]);
    diag[0] += h0 * (1.0 + h0 / h1);
    sup[0] -= h0 * h0 / h1;
    // M_{n-1} = (1 + hl/hp) M_{n-2} - (hl/hp) M_{n-3}
    let (hp, hl) = (h[n - 3], h[n - 2]);
    diag[k - 1] += hl * (1.0 + hl / hp);
    sub[k - 1] -= hl * hl / hp;

    let inner = solve_tridiagonal(&sub, &diag, &sup, &rhs);
    let mut m = vec![0.0; n];
    m[1..=k].copy_from_slice(&inner);
    m[0] = (1.0 + h0 / h1) * m[1] - (h0 / h1) * m[2];
    m[n - 1] = (1.0 + hl / hp) * m[n - 2] - (hl / hp) * m[n - 3];
    m
}

/// Thomas algorithm; `sub[0]` and `sup[n-1]` are ignored.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        c[i] = if i + 1 < n { sup[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut out = vec![0.0; n];
    out[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        out[i] = d[i] - c[i] * out[i + 1];
    }
    out
}

/// Duration, knot values and accessible range: the object being optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlProtocol {
    duration: f64,
    knots: Vec<f64>,
    range: RangeScenario,
    spline: CubicSpline,
}

/// On-disk form: `{duration, range: [g_min, g_max], knots: [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRecord {
    pub duration: f64,
    pub range: RangeScenario,
    pub knots: Vec<f64>,
}

impl ControlProtocol {
    /// Knots must lie inside the range.
    pub fn new(duration: f64, knots: Vec<f64>, range: RangeScenario) -> Result<Self> {
        if let Some(k) = knots.iter().find(|k| !range.contains(**k)) {
            return Err(Error::validation(format!(
                "knot {k} outside range [{}, {}]",
                range.g_min(),
                range.g_max()
            )));
        }
        Self::with_unbounded_knots(duration, knots, range)
    }

    /// Knots may leave the range (perturbed protocols); the evaluated field
    /// is still clamped.
    pub fn with_unbounded_knots(
        duration: f64,
        knots: Vec<f64>,
        range: RangeScenario,
    ) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::validation(format!(
                "duration must be positive, got {duration}"
            )));
        }
        if knots.is_empty() {
            return Err(Error::validation("protocol needs at least one knot"));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::validation("knots must be finite"));
        }
        let times = knot_times(duration, knots.len());
        let spline = CubicSpline::not_a_knot(&times, &knots)?;
        Ok(Self {
            duration,
            knots,
            range,
            spline,
        })
    }

    /// Constant field `g1` (the "no knots" baseline).
    pub fn baseline(duration: f64, g1: f64, range: RangeScenario) -> Result<Self> {
        Self::with_unbounded_knots(duration, vec![g1], range)
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn m_points(&self) -> usize {
        self.knots.len()
    }

    pub fn range(&self) -> RangeScenario {
        self.range
    }

    pub fn knot_times(&self) -> Vec<f64> {
        knot_times(self.duration, self.knots.len())
    }

    /// Field value at `t` in `[0, T]`.
    pub fn eval_field(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::validation(format!(
                "t = {t} outside [0, {}]",
                self.duration
            )));
        }
        Ok(self.field_unchecked(t))
    }

    /// Field without the domain check; integrator stages stay inside
    /// `[0, T]` up to rounding.
    #[inline]
    pub(crate) fn field_unchecked(&self, t: f64) -> f64 {
        self.range.clamp(self.spline.eval(t))
    }

    /// Interior times where the clamp switches on or off; the field has a
    /// kink there. Ascending.
    pub fn clamp_breakpoints(&self) -> Vec<f64> {
        let mut v = self.spline.crossings(self.range.g_min());
        v.extend(self.spline.crossings(self.range.g_max()));
        v.retain(|t| *t > 0.0 && *t < self.duration);
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Resamples this protocol's field onto `m` equally spaced knots.
    pub fn resampled(&self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::validation("cannot resample onto zero knots"));
        }
        let knots = knot_times(self.duration, m)
            .into_iter()
            .map(|t| self.field_unchecked(t))
            .collect();
        Self::new(self.duration, knots, self.range)
    }

    pub fn to_record(&self) -> ProtocolRecord {
        ProtocolRecord {
            duration: self.duration,
            range: self.range,
            knots: self.knots.clone(),
        }
    }

    pub fn from_record(r: &ProtocolRecord) -> Result<Self> {
        Self::new(r.duration, r.knots.clone(), r.range)
    }
}

/// `t_m = m T / (M - 1)`; a single knot sits at `t = 0`.
pub fn knot_times(duration: f64, m: usize) -> Vec<f64> {
    match m {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..m)
            .map(|i| {
                if i == m - 1 {
                    duration
                } else {
                    duration * i as f64 / (m - 1) as f64
                }
            })
            .collect(),
    }
}

/// `g = g_min + w (1 + tanh u) / 2`.
pub fn from_unconstrained(u: &[f64], range: RangeScenario) -> Vec<f64> {
    u.iter()
        .map(|&u| range.clamp(range.g_min() + range.width() * 0.5 * (1.0 + u.tanh())))
        .collect()
}

/// Inverse of [`from_unconstrained`] after pulling knots inward by `1e-9 w`.
pub fn to_unconstrained(knots: &[f64], range: RangeScenario) -> Vec<f64> {
    let w = range.width();
    let eps = 1e-9 * w;
    knots
        .iter()
        .map(|&g| {
            let g = g.clamp(range.g_min() + eps, range.g_max() - eps);
            (2.0 * (g - range.g_min()) / w - 1.0).atanh()
        })
        .collect()
}
