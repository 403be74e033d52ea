//! Basis-agnostic quantum linear algebra.
//!
//! States and operators are dense. Tensor products always order subsystems
//! slow-to-fast, so for a bipartite index `(i, c)` the flat index is
//! `i * dim_c + c` and the last factor is the one traced out by
//! [`partial_trace_last`].

use faer::{Mat, Side};
use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-10;
const HERMITIAN_TOL: f64 = 1e-12;

/// Unit-norm complex amplitude vector over an ordered basis.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    amps: Array1<C64>,
}

impl StateVector {
    /// Normalizes `amps`; fails on an empty or zero vector.
    pub fn normalized(amps: Array1<C64>) -> Result<Self> {
        if amps.is_empty() {
            return Err(Error::validation(
                "state vector must have positive dimension",
            ));
        }
        let norm = l2_norm(amps.view());
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::validation(format!(
                "cannot normalize vector of norm {norm}"
            )));
        }
        Ok(Self {
            amps: amps.mapv(|z| z / norm),
        })
    }

    /// Wraps amplitudes that are already normalized within 1e-10.
    pub fn new(amps: Array1<C64>) -> Result<Self> {
        if amps.is_empty() {
            return Err(Error::validation(
                "state vector must have positive dimension",
            ));
        }
        let norm = l2_norm(amps.view());
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::validation(format!(
                "state norm {norm} differs from 1"
            )));
        }
        Ok(Self { amps })
    }

    /// Propagated states keep whatever small norm drift the integrator left
    /// in them; callers report it instead of hiding it.
    pub(crate) fn from_raw(amps: Array1<C64>) -> Self {
        Self { amps }
    }

    pub fn from_real(amps: &[f64]) -> Result<Self> {
        Self::normalized(amps.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    /// Computational basis state `|index>`.
    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::validation(format!(
                "basis index {index} out of range for dim {dim}"
            )));
        }
        let mut amps = Array1::zeros(dim);
        amps[index] = C64::new(1.0, 0.0);
        Ok(Self { amps })
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &Array1<C64> {
        &self.amps
    }

    pub fn into_amplitudes(self) -> Array1<C64> {
        self.amps
    }

    pub fn norm(&self) -> f64 {
        l2_norm(self.amps.view())
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        check_dims(self.dim(), other.dim())?;
        Ok(inner(self.amps.view(), other.amps.view()))
    }

    /// Product state `self ⊗ other`, `other` being the fast index.
    pub fn tensor(&self, other: &StateVector) -> StateVector {
        let (n, k) = (self.dim(), other.dim());
        let mut amps = Array1::zeros(n * k);
        for (i, a) in self.amps.iter().enumerate() {
            for (c, b) in other.amps.iter().enumerate() {
                amps[i * k + c] = a * b;
            }
        }
        StateVector { amps }
    }

    /// Rotates the global phase so the largest-magnitude amplitude is real
    /// and positive (first such amplitude on ties).
    pub fn with_fixed_phase(mut self) -> Self {
        let mut best = 0;
        let mut best_mag = -1.0;
        for (i, z) in self.amps.iter().enumerate() {
            let m = z.norm_sqr();
            if m > best_mag {
                best_mag = m;
                best = i;
            }
        }
        let z = self.amps[best];
        if z.norm() > 0.0 {
            let phase = z.conj() / z.norm();
            self.amps.mapv_inplace(|a| a * phase);
            self.amps[best] = C64::new(self.amps[best].norm(), 0.0);
        }
        self
    }
}

/// Dense complex Hermitian matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator {
    entries: Array2<C64>,
}

impl HermitianOperator {
    pub fn new(entries: Array2<C64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r == 0 || r != c {
            return Err(Error::validation(format!(
                "operator must be square and non-empty, got {r}x{c}"
            )));
        }
        for i in 0..r {
            for j in i..r {
                let d = entries[[i, j]] - entries[[j, i]].conj();
                if d.norm() > HERMITIAN_TOL || !entries[[i, j]].is_finite() {
                    return Err(Error::validation(format!(
                        "operator is not Hermitian at ({i}, {j}): |H_ij - conj(H_ji)| = {:e}",
                        d.norm()
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_real(entries: Array2<f64>) -> Result<Self> {
        Self::new(entries.mapv(|x| C64::new(x, 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn is_real(&self) -> bool {
        self.entries.iter().all(|z| z.im == 0.0)
    }

    /// `self + g * other`.
    pub fn plus_scaled(&self, g: f64, other: &HermitianOperator) -> Result<HermitianOperator> {
        check_dims(self.dim(), other.dim())?;
        let entries = &self.entries + &other.entries.mapv(|z| z * g);
        Ok(HermitianOperator { entries })
    }

    /// `self ⊗ I_k`.
    pub fn tensor_identity(&self, k: usize) -> HermitianOperator {
        let n = self.dim();
        let mut entries = Array2::zeros((n * k, n * k));
        for i in 0..n {
            for j in 0..n {
                let v = self.entries[[i, j]];
                if v != C64::new(0.0, 0.0) {
                    for c in 0..k {
                        entries[[i * k + c, j * k + c]] = v;
                    }
                }
            }
        }
        HermitianOperator { entries }
    }

    pub fn apply(&self, s: &StateVector) -> Result<Array1<C64>> {
        check_dims(self.dim(), s.dim())?;
        Ok(self.entries.dot(s.amplitudes()))
    }

    /// Largest element magnitude of the commutator `[self, other]`.
    pub fn commutator_max(&self, other: &HermitianOperator) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        let c = self.entries.dot(&other.entries) - other.entries.dot(&self.entries);
        Ok(c.iter().map(|z| z.norm()).fold(0.0, f64::max))
    }
}

/// Density matrix: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    entries: Array2<C64>,
}

impl DensityMatrix {
    /// Validates all three density-matrix invariants within 1e-10.
    pub fn new(entries: Array2<C64>) -> Result<Self> {
        let op = HermitianOperator::new(entries.clone())
            .map_err(|_| Error::validation("density matrix is not Hermitian"))?;
        let rho = Self { entries };
        let tr = rho.trace();
        if (tr - 1.0).abs() > NORM_TOL {
            return Err(Error::validation(format!(
                "density matrix trace {tr} differs from 1"
            )));
        }
        let spec = eigh(&op)?;
        if spec.energies[0] < -NORM_TOL {
            return Err(Error::validation(format!(
                "density matrix has negative eigenvalue {}",
                spec.energies[0]
            )));
        }
        Ok(rho)
    }

    /// `|s><s|`.
    pub fn pure(s: &StateVector) -> Self {
        let a = s.amplitudes();
        let n = a.len();
        let entries = Array2::from_shape_fn((n, n), |(i, j)| a[i] * a[j].conj());
        Self { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.diag().iter().map(|z| z.re).sum()
    }

    /// `Tr(rho^2)`.
    pub fn purity(&self) -> f64 {
        // Hermitian: Tr(rho^2) = sum_ij |rho_ij|^2
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub energies: Vec<f64>,
    pub states: Vec<StateVector>,
}

/// Full dense Hermitian eigendecomposition, eigenvectors phase-fixed.
pub fn eigh(h: &HermitianOperator) -> Result<Spectrum> {
    let n = h.dim();
    let e = h.entries();
    let (values, vectors): (Vec<f64>, Vec<Array1<C64>>) = if h.is_real() {
        let m = Mat::<f64>::from_fn(n, n, |i, j| e[[i, j]].re);
        let dec = m
            .self_adjoint_eigen(Side::Lower)
            .map_err(|err| Error::Numerical(format!("eigensolver did not converge: {err:?}")))?;
        let s = dec.S().column_vector();
        let u = dec.U();
        (
            (0..n).map(|i| s[i]).collect(),
            (0..n)
                .map(|k| (0..n).map(|i| C64::new(u[(i, k)], 0.0)).collect())
                .collect(),
        )
    } else {
        let m = Mat::<C64>::from_fn(n, n, |i, j| e[[i, j]]);
        let dec = m
            .self_adjoint_eigen(Side::Lower)
            .map_err(|err| Error::Numerical(format!("eigensolver did not converge: {err:?}")))?;
        let s = dec.S().column_vector();
        let u = dec.U();
        (
            (0..n).map(|i| s[i].re).collect(),
            (0..n)
                .map(|k| (0..n).map(|i| u[(i, k)]).collect())
                .collect(),
        )
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "eigensolver returned non-finite eigenvalues".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut energies = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for k in order {
        energies.push(values[k]);
        states.push(StateVector::normalized(vectors[k].clone())?.with_fixed_phase());
    }
    Ok(Spectrum { energies, states })
}

/// Lowest eigenpair; a ground state that is not isolated is an error.
pub fn ground_state(h: &HermitianOperator) -> Result<(f64, StateVector)> {
    let Spectrum {
        energies,
        mut states,
    } = eigh(h)?;
    let e0 = energies[0];
    if let Some(&e1) = energies.get(1) {
        let gap = e1 - e0;
        if gap < 1e-10 * e0.abs().max(1.0) {
            return Err(Error::DegenerateGroundState { energy: e0, gap });
        }
    }
    Ok((e0, states.swap_remove(0)))
}

/// `|<a|b>|^2`.
pub fn fidelity_pure(a: &StateVector, b: &StateVector) -> Result<f64> {
    Ok(a.inner(b)?.norm_sqr().min(1.0))
}

/// `<s|H|s>`; the imaginary part must vanish within 1e-10 relative.
pub fn expectation(h: &HermitianOperator, s: &StateVector) -> Result<f64> {
    let hs = h.apply(s)?;
    let v = inner(s.amplitudes().view(), hs.view());
    if v.im.abs() > 1e-10 * v.re.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "expectation has imaginary part {:e}",
            v.im
        )));
    }
    Ok(v.re)
}

/// Reduced density matrix over the first factor of a `dim_keep x dim_trace`
/// bipartition.
pub fn partial_trace_last(
    s: &StateVector,
    dim_keep: usize,
    dim_trace: usize,
) -> Result<DensityMatrix> {
    if dim_keep == 0 || dim_trace == 0 || dim_keep * dim_trace != s.dim() {
        return Err(Error::validation(format!(
            "cannot factor dimension {} as {dim_keep} x {dim_trace}",
            s.dim()
        )));
    }
    let psi = s
        .amplitudes()
        .view()
        .into_shape_with_order((dim_keep, dim_trace))
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let psi_dag = psi.t().mapv(|z| z.conj());
    let entries = psi.dot(&psi_dag);
    Ok(DensityMatrix { entries })
}

/// Mixed-state fidelity: `fidelity = overlap^2` where
/// `overlap = <tar|rho|tar>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedFidelity {
    pub fidelity: f64,
    pub overlap: f64,
}

pub fn fidelity_mixed(rho: &DensityMatrix, tar: &StateVector) -> Result<MixedFidelity> {
    check_dims(rho.dim(), tar.dim())?;
    let t = tar.amplitudes();
    let rt = rho.entries().dot(t);
    let overlap = inner(t.view(), rt.view()).re.clamp(0.0, 1.0);
    Ok(MixedFidelity {
        fidelity: overlap * overlap,
        overlap,
    })
}

/// `<tar| Tr_last(|psi><psi|) |tar>` computed without forming the density
/// matrix: `sum_c |sum_i conj(tar_i) psi_{i,c}|^2`.
pub(crate) fn reduced_overlap(psi: ArrayView1<C64>, tar: ArrayView1<C64>, dim_trace: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..dim_trace {
        let mut acc = C64::new(0.0, 0.0);
        for (i, t) in tar.iter().enumerate() {
            acc += t.conj() * psi[i * dim_trace + c];
        }
        total += acc.norm_sqr();
    }
    total
}

pub(crate) fn inner(a: ArrayView1<C64>, b: ArrayView1<C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub(crate) fn l2_norm(a: ArrayView1<C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::validation(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> StateVector {
        let amps: Array1<C64> = (0..n)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        StateVector::normalized(amps).unwrap()
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> HermitianOperator {
        let mut m = Array2::<C64>::zeros((n, n));
        for i in 0..n {
            m[[i, i]] = C64::new(rng.random_range(-2.0..2.0), 0.0);
            for j in 0..i {
                let z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                m[[i, j]] = z;
                m[[j, i]] = z.conj();
            }
        }
        HermitianOperator::new(m).unwrap()
    }

    #[test]
    fn rejects_non_hermitian() {
        let mut m = Array2::<C64>::zeros((2, 2));
        m[[0, 1]] = C64::new(1.0, 0.0);
        assert!(matches!(
            HermitianOperator::new(m),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn fidelity_of_identical_and_orthogonal_states() {
        let a = StateVector::basis(3, 0).unwrap();
        let b = StateVector::basis(3, 2).unwrap();
        assert_eq!(fidelity_pure(&a, &a).unwrap(), 1.0);
        assert_eq!(fidelity_pure(&a, &b).unwrap(), 0.0);
        let c = StateVector::basis(4, 0).unwrap();
        assert!(fidelity_pure(&a, &c).is_err());
    }

    #[test]
    fn complex_hermitian_spectrum_is_orthonormal_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_hermitian(&mut rng, 12);
        let spec = eigh(&h).unwrap();
        assert!(spec.energies.windows(2).all(|w| w[0] <= w[1]));
        for (i, si) in spec.states.iter().enumerate() {
            let hs = h.apply(si).unwrap();
            for k in 0..12 {
                assert_abs_diff_eq!(
                    (hs[k] - si.amplitudes()[k] * spec.energies[i]).norm(),
                    0.0,
                    epsilon = 1e-10
                );
            }
            for (j, sj) in spec.states.iter().enumerate() {
                let v = si.inner(sj).unwrap().norm();
                assert_abs_diff_eq!(v, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn ground_state_phase_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_hermitian(&mut rng, 6);
        let (_, s) = ground_state(&h).unwrap();
        let max = s
            .amplitudes()
            .iter()
            .cloned()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .unwrap();
        assert!(max.re > 0.0 && max.im == 0.0);
    }

    #[test]
    fn degenerate_ground_state_is_rejected() {
        let h = HermitianOperator::from_real(Array2::from_diag(&ndarray::arr1(&[-1.0, -1.0, 2.0])))
            .unwrap();
        assert!(matches!(
            ground_state(&h),
            Err(Error::DegenerateGroundState { .. })
        ));
    }

    #[test]
    fn variational_bound_holds_for_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_hermitian(&mut rng, 8);
        let (e0, _) = ground_state(&h).unwrap();
        for _ in 0..100 {
            let s = random_state(&mut rng, 8);
            assert!(e0 <= expectation(&h, &s).unwrap() + 1e-12);
        }
    }

    #[test]
    fn expectation_of_superposition() {
        let h =
            HermitianOperator::from_real(Array2::from_diag(&ndarray::arr1(&[-1.0, 3.0]))).unwrap();
        let s = StateVector::from_real(&[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(expectation(&h, &s).unwrap(), 1.0, epsilon = 1e-14);
        let e = StateVector::basis(2, 1).unwrap();
        assert_abs_diff_eq!(expectation(&h, &e).unwrap(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn partial_trace_of_bell_state_is_maximally_mixed() {
        let bell = StateVector::from_real(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        let rho = partial_trace_last(&bell, 2, 2).unwrap();
        assert_abs_diff_eq!(rho.entries()[[0, 0]].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rho.entries()[[1, 1]].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rho.entries()[[0, 1]].norm(), 0.0, epsilon = 1e-15);
        assert!(partial_trace_last(&bell, 3, 2).is_err());
    }

    #[test]
    fn partial_trace_matches_index_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_state(&mut rng, 6);
        let rho = partial_trace_last(&s, 3, 2).unwrap();
        let a = s.amplitudes();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = C64::new(0.0, 0.0);
                for c in 0..2 {
                    acc += a[i * 2 + c] * a[j * 2 + c].conj();
                }
                assert_abs_diff_eq!((rho.entries()[[i, j]] - acc).norm(), 0.0, epsilon = 1e-12);
            }
        }
        DensityMatrix::new(rho.entries().clone()).unwrap();
    }

    #[test]
    fn mixed_fidelity_cases() {
        let tar = StateVector::from_real(&[0.6, 0.8, 0.0, 0.0]).unwrap();
        let f = fidelity_mixed(&DensityMatrix::pure(&tar), &tar).unwrap();
        assert_abs_diff_eq!(f.fidelity, 1.0, epsilon = 1e-14);

        let mixed = DensityMatrix::new(Array2::from_diag(&Array1::from_elem(
            4,
            C64::new(0.25, 0.0),
        )))
        .unwrap();
        let f = fidelity_mixed(&mixed, &tar).unwrap();
        assert_abs_diff_eq!(f.overlap, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(f.fidelity, 0.0625, epsilon = 1e-15);
    }

    #[test]
    fn reduced_overlap_matches_density_matrix_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let psi = random_state(&mut rng, 15);
        let tar = random_state(&mut rng, 5);
        let rho = partial_trace_last(&psi, 5, 3).unwrap();
        let direct = fidelity_mixed(&rho, &tar).unwrap().overlap;
        let fast = reduced_overlap(psi.amplitudes().view(), tar.amplitudes().view(), 3);
        assert_abs_diff_eq!(direct, fast, epsilon = 1e-13);
    }

    #[test]
    fn density_matrix_validation() {
        let bad_trace = Array2::from_diag(&Array1::from_elem(2, C64::new(0.4, 0.0)));
        assert!(DensityMatrix::new(bad_trace).is_err());
        let negative =
            Array2::from_diag(&ndarray::arr1(&[C64::new(1.2, 0.0), C64::new(-0.2, 0.0)]));
        assert!(DensityMatrix::new(negative).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn state(n: usize) -> impl Strategy<Value = StateVector> {
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n).prop_filter_map(
                "nonzero",
                |v| {
                    StateVector::normalized(v.into_iter().map(|(a, b)| C64::new(a, b)).collect())
                        .ok()
                },
            )
        }

        proptest! {
            #[test]
            fn fidelity_is_symmetric_and_phase_invariant(a in state(5), b in state(5), phi in 0.0f64..6.28) {
                let f_ab = fidelity_pure(&a, &b).unwrap();
                let f_ba = fidelity_pure(&b, &a).unwrap();
                prop_assert!((f_ab - f_ba).abs() < 1e-14);
                let rotated = StateVector::new(a.amplitudes().mapv(|z| z * C64::from_polar(1.0, phi))).unwrap();
                prop_assert!((fidelity_pure(&rotated, &b).unwrap() - f_ab).abs() < 1e-13);
            }

            #[test]
            fn product_states_trace_to_pure_states(a in state(3), c in state(4)) {
                let rho = partial_trace_last(&a.tensor(&c), 3, 4).unwrap();
                prop_assert!((rho.purity() - 1.0).abs() < 1e-10);
                prop_assert!((rho.trace() - 1.0).abs() < 1e-12);
                prop_assert!((fidelity_mixed(&rho, &a).unwrap().fidelity - 1.0).abs() < 1e-10);
            }

            #[test]
            fn mixed_fidelity_of_pure_state_is_squared_pure_fidelity(psi in state(6), tar in state(6)) {
                let f = fidelity_mixed(&DensityMatrix::pure(&psi), &tar).unwrap();
                let p = fidelity_pure(&psi, &tar).unwrap();
                prop_assert!((f.fidelity - p * p).abs() < 1e-13);
            }

            #[test]
            fn normalized_states_have_unit_norm(s in state(9)) {
                prop_assert!((s.norm() - 1.0).abs() < 1e-10);
            }
        }
    }
}
