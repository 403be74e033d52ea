//! Harmonic-oscillator orbitals and contact-interaction matrix elements.
//!
//! Units: hbar = omega = m_B = 1, so an orbital of mass `m` has length scale
//! `1/sqrt(m)`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Upper bound on orbital indices accepted by the recurrences.
pub const MAX_ORBITAL: usize = 200;

/// Normalized Hermite polynomials `p_n(x)` such that `p_n(x) exp(-x^2/2)`
/// are the unit-mass oscillator eigenfunctions; returns `p_0..=p_nmax`.
fn hermite_polys(nmax: usize, x: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(nmax + 1);
    p.push(PI.powf(-0.25));
    if nmax >= 1 {
        p.push(2f64.sqrt() * x * p[0]);
    }
    for n in 1..nmax {
        let nf = n as f64;
        let next = (2.0 / (nf + 1.0)).sqrt() * x * p[n] - (nf / (nf + 1.0)).sqrt() * p[n - 1];
        p.push(next);
    }
    p
}

/// `n`-th oscillator eigenfunction for a particle of mass `mass`:
/// `m^{1/4} h_n(sqrt(m) x)`.
pub fn ho_orbital(n: usize, mass: f64, x: f64) -> Result<f64> {
    if n >= MAX_ORBITAL {
        return Err(Error::validation(format!(
            "orbital index {n} must be below {MAX_ORBITAL}"
        )));
    }
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::validation(format!(
            "mass must be positive, got {mass}"
        )));
    }
    let s = mass.sqrt() * x;
    // Run the recurrence on the Gaussian-weighted functions so large |x|
    // underflows to zero instead of overflowing the polynomial part.
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25) * (-0.5 * s * s).exp();
    for k in 0..n {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * s * cur - (kf / (kf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    Ok(mass.powf(0.25) * cur)
}

/// Gauss-Hermite rule for weight `exp(-x^2)` with `n` nodes (Newton
/// iteration on the normalized recurrence).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `∫ ψ^A_i ψ^A_k ψ^B_j ψ^B_l dx` with A orbitals of mass `mass_a` and B
/// orbitals of mass `mass_b`.
pub fn delta_integral(
    i: usize,
    k: usize,
    j: usize,
    l: usize,
    mass_a: f64,
    mass_b: f64,
) -> Result<f64> {
    for idx in [i, k, j, l] {
        if idx >= MAX_ORBITAL {
            return Err(Error::validation(format!(
                "orbital index {idx} must be below {MAX_ORBITAL}"
            )));
        }
    }
    check_masses(mass_a, mass_b)?;
    if (i + k + j + l) % 2 == 1 {
        return Ok(0.0);
    }
    let rule = QuadratureRule::new(i + k + j + l + 8, mass_a, mass_b);
    let pa_i = rule.polys_a(i.max(k));
    let pb_j = rule.polys_b(j.max(l));
    Ok(rule.integrate(|q| pa_i[q][i] * pa_i[q][k] * pb_j[q][j] * pb_j[q][l]))
}

fn check_masses(mass_a: f64, mass_b: f64) -> Result<()> {
    if !(mass_a > 0.0 && mass_b > 0.0 && mass_a.is_finite() && mass_b.is_finite()) {
        return Err(Error::validation(format!(
            "masses must be positive, got {mass_a}, {mass_b}"
        )));
    }
    Ok(())
}

/// Gauss-Hermite nodes rescaled to the combined weight
/// `exp(-(mass_a + mass_b) x^2)`.
struct QuadratureRule {
    x: Vec<f64>,
    w: Vec<f64>,
    mass_a: f64,
    mass_b: f64,
}

impl QuadratureRule {
    fn new(nodes: usize, mass_a: f64, mass_b: f64) -> Self {
        let (s, w) = gauss_hermite(nodes);
        let scale = (mass_a + mass_b).sqrt();
        // Smallest weights first so the tails are summed before the bulk.
        let mut order: Vec<usize> = (0..nodes).collect();
        order.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
        Self {
            x: order.iter().map(|&q| s[q] / scale).collect(),
            w: order.iter().map(|&q| w[q] / scale).collect(),
            mass_a,
            mass_b,
        }
    }

    /// Polynomial parts `m^{1/4} p_n(sqrt(m) x)` at each node, `n <= nmax`.
    fn polys(&self, nmax: usize, mass: f64) -> Vec<Vec<f64>> {
        let pref = mass.powf(0.25);
        self.x
            .iter()
            .map(|&x| {
                hermite_polys(nmax, mass.sqrt() * x)
                    .into_iter()
                    .map(|p| pref * p)
                    .collect()
            })
            .collect()
    }

    fn polys_a(&self, nmax: usize) -> Vec<Vec<f64>> {
        self.polys(nmax, self.mass_a)
    }

    fn polys_b(&self, nmax: usize) -> Vec<Vec<f64>> {
        self.polys(nmax, self.mass_b)
    }

    fn integrate(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.w.iter().enumerate().map(|(q, w)| w * f(q)).sum()
    }
}

/// Frozen table of `delta_integral(i, k, j, l)` for `i, k < n_a` and
/// `j, l < n_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactTable {
    pub mass_a: f64,
    pub mass_b: f64,
    pub n_a: usize,
    pub n_b: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CachedTable {
    table: ContactTable,
    checksum: String,
}

impl ContactTable {
    pub fn compute(mass_a: f64, mass_b: f64, n_a: usize, n_b: usize) -> Result<Self> {
        check_masses(mass_a, mass_b)?;
        if n_a == 0 || n_b == 0 || n_a > MAX_ORBITAL || n_b > MAX_ORBITAL {
            return Err(Error::validation(format!(
                "invalid table size {n_a} x {n_b}"
            )));
        }
        // One rule exact for the highest total degree serves every entry.
        let rule = QuadratureRule::new(2 * (n_a - 1) + 2 * (n_b - 1) + 8, mass_a, mass_b);
        let pa = rule.polys_a(n_a - 1);
        let pb = rule.polys_b(n_b - 1);
        let mut values = vec![0.0; n_a * n_a * n_b * n_b];
        let idx = |i: usize, k: usize, j: usize, l: usize| ((i * n_a + k) * n_b + j) * n_b + l;
        for i in 0..n_a {
            for k in i..n_a {
                for j in 0..n_b {
                    for l in j..n_b {
                        let v = if (i + k + j + l) % 2 == 1 {
                            0.0
                        } else {
                            rule.integrate(|q| pa[q][i] * pa[q][k] * pb[q][j] * pb[q][l])
                        };
                        values[idx(i, k, j, l)] = v;
                        values[idx(k, i, j, l)] = v;
                        values[idx(i, k, l, j)] = v;
                        values[idx(k, i, l, j)] = v;
                    }
                }
            }
        }
        Ok(Self {
            mass_a,
            mass_b,
            n_a,
            n_b,
            values,
        })
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize, j: usize, l: usize) -> f64 {
        self.values[((i * self.n_a + k) * self.n_b + j) * self.n_b + l]
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.mass_a.to_le_bytes());
        h.update(self.mass_b.to_le_bytes());
        h.update((self.n_a as u64).to_le_bytes());
        h.update((self.n_b as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cache_path(dir: &Path, mass_a: f64, mass_b: f64, n_a: usize, n_b: usize) -> PathBuf {
        dir.join(format!(
            "contact_{:016x}_{:016x}_{n_a}x{n_b}.json",
            mass_a.to_bits(),
            mass_b.to_bits()
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cached = CachedTable {
            checksum: self.checksum(),
            table: self.clone(),
        };
        let text = serde_json::to_string(&cached).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cached: CachedTable = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let t = cached.table;
        if t.values.len() != t.n_a * t.n_a * t.n_b * t.n_b {
            return Err(Error::Parse(format!(
                "{}: table has wrong length",
                path.display()
            )));
        }
        if t.checksum() != cached.checksum {
            return Err(Error::Parse(format!(
                "{}: checksum mismatch",
                path.display()
            )));
        }
        Ok(t)
    }

    /// Reads a matching table from `dir`, recomputing (and rewriting) it when
    /// absent or corrupt.
    pub fn load_or_compute(
        dir: &Path,
        mass_a: f64,
        mass_b: f64,
        n_a: usize,
        n_b: usize,
    ) -> Result<Self> {
        let path = Self::cache_path(dir, mass_a, mass_b, n_a, n_b);
        if let Ok(t) = Self::load(&path) {
            if t.mass_a == mass_a && t.mass_b == mass_b && t.n_a == n_a && t.n_b == n_b {
                return Ok(t);
            }
        }
        let t = Self::compute(mass_a, mass_b, n_a, n_b)?;
        fs::create_dir_all(dir)?;
        t.save(&path)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const MU: f64 = 40.0 / 6.0;

    fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
        let n = ((hi - lo) / step).round() as usize;
        let h = (hi - lo) / n as f64;
        let mut acc = 0.5 * (f(lo) + f(hi));
        for s in 1..n {
            acc += f(lo + s as f64 * h);
        }
        acc * h
    }

    #[test]
    fn orbital_values_at_origin() {
        assert_abs_diff_eq!(
            ho_orbital(0, 1.0, 0.0).unwrap(),
            PI.powf(-0.25),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            ho_orbital(0, 1.0, 0.0).unwrap(),
            0.7511255444649425,
            epsilon = 1e-12
        );
        assert_eq!(ho_orbital(1, 1.0, 0.0).unwrap(), 0.0);
        assert!(ho_orbital(200, 1.0, 0.0).is_err());
        assert!(ho_orbital(3, 0.0, 0.0).is_err());
    }

    #[test]
    fn orbitals_are_normalized() {
        for mass in [1.0, MU] {
            for n in 0..=20 {
                let norm = trapezoid(
                    |x| ho_orbital(n, mass, x).unwrap().powi(2),
                    -12.0,
                    12.0,
                    1e-3,
                );
                assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let (x, w) = gauss_hermite(30);
        // ∫ x^{2k} e^{-x^2} = Γ(k + 1/2)
        let mut gamma = PI.sqrt();
        for k in 0..20 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(2 * k)).sum();
            assert!(
                (q - gamma).abs() < 1e-12 * gamma,
                "moment {k}: {q} vs {gamma}"
            );
            gamma *= k as f64 + 0.5;
        }
    }

    #[test]
    fn ground_orbital_contact_integral_closed_form() {
        let v = delta_integral(0, 0, 0, 0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(v, 1.0 / (2.0 * PI).sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(v, 0.3989422804014327, epsilon = 1e-12);
    }

    #[test]
    fn odd_total_index_vanishes_exactly() {
        assert_eq!(delta_integral(1, 0, 0, 0, MU, 1.0).unwrap(), 0.0);
        assert_eq!(delta_integral(3, 2, 5, 1, MU, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn contact_integrals_match_trapezoid_oracle() {
        let cases = [
            (2, 0, 1, 1),
            (0, 0, 0, 0),
            (3, 1, 2, 0),
            (5, 4, 7, 2),
            (6, 6, 9, 9),
        ];
        for (i, k, j, l) in cases {
            let gh = delta_integral(i, k, j, l, MU, 1.0).unwrap();
            let oracle = trapezoid(
                |x| {
                    ho_orbital(i, MU, x).unwrap()
                        * ho_orbital(k, MU, x).unwrap()
                        * ho_orbital(j, 1.0, x).unwrap()
                        * ho_orbital(l, 1.0, x).unwrap()
                },
                -12.0,
                12.0,
                1e-4,
            );
            assert_abs_diff_eq!(gh, oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn equal_masses_swap_symmetry() {
        for (i, k, j, l) in [(1, 3, 0, 2), (4, 0, 2, 2), (5, 1, 3, 3)] {
            let a = delta_integral(i, k, j, l, 1.0, 1.0).unwrap();
            let b = delta_integral(j, l, i, k, 1.0, 1.0).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn table_agrees_with_pointwise_integrals() {
        let t = ContactTable::compute(MU, 1.0, 6, 6).unwrap();
        for (i, k, j, l) in [(0, 0, 0, 0), (5, 3, 2, 0), (1, 4, 5, 2), (2, 2, 3, 1)] {
            let direct = delta_integral(i, k, j, l, MU, 1.0).unwrap();
            assert_abs_diff_eq!(t.get(i, k, j, l), direct, epsilon = 1e-13);
            assert_eq!(t.get(i, k, j, l), t.get(k, i, l, j));
        }
    }

    #[test]
    fn table_cache_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let t = ContactTable::load_or_compute(dir.path(), MU, 1.0, 4, 3).unwrap();
        let path = ContactTable::cache_path(dir.path(), MU, 1.0, 4, 3);
        assert_eq!(ContactTable::load(&path).unwrap(), t);

        let text = fs::read_to_string(&path).unwrap();
        let extra = text.replacen("\"values\":[", "\"values\":[1.5,", 1);
        fs::write(&path, extra).unwrap();
        assert!(ContactTable::load(&path).is_err());
        let bad_sum = text.replacen("\"checksum\":\"", "\"checksum\":\"0", 1);
        fs::write(&path, bad_sum).unwrap();
        assert!(ContactTable::load(&path).is_err());
        // Regenerated silently.
        assert_eq!(
            ContactTable::load_or_compute(dir.path(), MU, 1.0, 4, 3).unwrap(),
            t
        );
    }
}
