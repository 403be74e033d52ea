//! Drift/control Hamiltonian pairs for the supported model families.
//!
//! * two coupled qubits (units hbar = Delta = 1),
//! * one A fermion and two B fermions in a 1D harmonic trap with A-B contact
//!   interactions (units hbar = omega = m_B = 1),
//! * the same mixture plus a distinguishable spectator of mass m_B coupled to
//!   everything with a fixed contact strength G.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ground_state, HermitianOperator, StateVector};

pub mod fock;
pub mod integrals;

pub use fock::{hop, FockBasis, FockConfig};
pub use integrals::{delta_integral, gauss_hermite, ho_orbital, ContactTable};

/// `^40K-^6Li` mass ratio.
pub const K40_LI6_MASS_RATIO: f64 = 40.0 / 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoQubitParams {
    pub delta: f64,
}

impl Default for TwoQubitParams {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FermionModelParams {
    /// `m_A / m_B`.
    pub mass_ratio: f64,
    /// Orbitals per component.
    pub cutoff_c: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreeComponentParams {
    pub base: FermionModelParams,
    /// Spectator orbitals.
    pub cutoff_k: usize,
    /// Spectator contact strength.
    pub g_spectator: f64,
}

/// One of the three model families with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    TwoQubit(TwoQubitParams),
    TwoComponent(FermionModelParams),
    ThreeComponent(ThreeComponentParams),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fermion = |p: &FermionModelParams| -> Result<()> {
            if !(p.mass_ratio > 0.0 && p.mass_ratio.is_finite()) {
                return Err(Error::validation(format!(
                    "mass ratio must be positive, got {}",
                    p.mass_ratio
                )));
            }
            if p.cutoff_c < 2 {
                return Err(Error::validation(format!(
                    "cutoff C = {} must be at least 2",
                    p.cutoff_c
                )));
            }
            if p.cutoff_c > integrals::MAX_ORBITAL {
                return Err(Error::validation(format!(
                    "cutoff C = {} too large",
                    p.cutoff_c
                )));
            }
            Ok(())
        };
        match self {
            ModelSpec::TwoQubit(p) => {
                if !(p.delta > 0.0 && p.delta.is_finite()) {
                    return Err(Error::validation(format!(
                        "delta must be positive, got {}",
                        p.delta
                    )));
                }
                Ok(())
            }
            ModelSpec::TwoComponent(p) => fermion(p),
            ModelSpec::ThreeComponent(p) => {
                fermion(&p.base)?;
                if p.cutoff_k < 1 || p.cutoff_k > integrals::MAX_ORBITAL {
                    return Err(Error::validation(format!(
                        "cutoff K = {} out of range",
                        p.cutoff_k
                    )));
                }
                if !p.g_spectator.is_finite() {
                    return Err(Error::validation("spectator coupling G must be finite"));
                }
                Ok(())
            }
        }
    }

    /// Builds the model, reading and writing contact tables under
    /// `cache_dir` when given.
    pub fn build(&self, cache_dir: Option<&Path>) -> Result<ModelInstance> {
        self.validate()?;
        let tables = TableSource { cache_dir };
        match self {
            ModelSpec::TwoQubit(p) => build_two_qubit(*p),
            ModelSpec::TwoComponent(p) => build_two_component_with(*p, &tables),
            ModelSpec::ThreeComponent(p) => build_three_component_with(*p, &tables),
        }
    }

    /// The model whose ground states define `|ini>` and `|tar>`: the
    /// spectator-free mixture for the three-component family.
    pub fn target_family(&self) -> ModelSpec {
        match self {
            ModelSpec::ThreeComponent(p) => ModelSpec::TwoComponent(p.base),
            other => *other,
        }
    }
}

/// How the basis of a [`ModelInstance`] is laid out.
#[derive(Clone, Debug, PartialEq)]
pub enum BasisDescription {
    /// `|↑↑>, |↑↓>, |↓↑>, |↓↓>`.
    TwoQubit,
    Fock(FockBasis),
    /// Fock basis (slow) times spectator orbitals (fast).
    FockWithSpectator {
        fock: FockBasis,
        spectator_orbitals: usize,
    },
}

/// `H(g) = h0 + g * hc` on a fixed basis.
#[derive(Clone, Debug)]
pub struct ModelInstance {
    pub h0: HermitianOperator,
    pub hc: HermitianOperator,
    pub basis: BasisDescription,
    /// Subsystem dimensions, slow to fast.
    pub subsystem_dims: Vec<usize>,
}

impl ModelInstance {
    pub fn new(
        h0: HermitianOperator,
        hc: HermitianOperator,
        basis: BasisDescription,
        subsystem_dims: Vec<usize>,
    ) -> Result<Self> {
        if h0.dim() != hc.dim() {
            return Err(Error::validation(format!(
                "h0 dim {} != hc dim {}",
                h0.dim(),
                hc.dim()
            )));
        }
        if subsystem_dims.iter().product::<usize>() != h0.dim() {
            return Err(Error::validation(
                "subsystem dimensions do not multiply to the operator dimension",
            ));
        }
        Ok(Self {
            h0,
            hc,
            basis,
            subsystem_dims,
        })
    }

    pub fn dim(&self) -> usize {
        self.h0.dim()
    }

    pub fn hamiltonian(&self, g: f64) -> HermitianOperator {
        // dims are equal by construction
        self.h0
            .plus_scaled(g, &self.hc)
            .expect("h0 and hc share a dimension")
    }

    /// Same physics with the drift redefined as `h0 + g_shift * hc`, so the
    /// control field is measured relative to `g_shift`.
    pub fn shifted(&self, g_shift: f64) -> ModelInstance {
        ModelInstance {
            h0: self.hamiltonian(g_shift),
            ..self.clone()
        }
    }
}

struct TableSource<'a> {
    cache_dir: Option<&'a Path>,
}

impl TableSource<'_> {
    fn get(&self, mass_a: f64, mass_b: f64, n_a: usize, n_b: usize) -> Result<ContactTable> {
        match self.cache_dir {
            Some(dir) => ContactTable::load_or_compute(dir, mass_a, mass_b, n_a, n_b),
            None => ContactTable::compute(mass_a, mass_b, n_a, n_b),
        }
    }
}

/// `H0 = -(Δ/(2√2)) (σx1 + σx2 + σz1 + σz2)`, `Hc = -Δ σz1 σz2`.
pub fn build_two_qubit(p: TwoQubitParams) -> Result<ModelInstance> {
    ModelSpec::TwoQubit(p).validate()?;
    let sx = [[0.0, 1.0], [1.0, 0.0]];
    let sz = [[1.0, 0.0], [0.0, -1.0]];
    let id = [[1.0, 0.0], [0.0, 1.0]];
    let kron = |a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]| {
        Array2::from_shape_fn((4, 4), |(i, j)| a[i / 2][j / 2] * b[i % 2][j % 2])
    };
    let single = -p.delta / (2.0 * 2f64.sqrt());
    let h0 = (kron(&sx, &id) + kron(&id, &sx) + kron(&sz, &id) + kron(&id, &sz)) * single;
    let hc = kron(&sz, &sz) * (-p.delta);
    ModelInstance::new(
        HermitianOperator::from_real(h0)?,
        HermitianOperator::from_real(hc)?,
        BasisDescription::TwoQubit,
        vec![2, 2],
    )
}

pub fn build_two_component(p: FermionModelParams) -> Result<ModelInstance> {
    ModelSpec::TwoComponent(p).validate()?;
    build_two_component_with(p, &TableSource { cache_dir: None })
}

pub fn build_three_component(p: ThreeComponentParams) -> Result<ModelInstance> {
    ModelSpec::ThreeComponent(p).validate()?;
    build_three_component_with(p, &TableSource { cache_dir: None })
}

/// Real-valued `(h0, hc)` of the two-component mixture.
fn two_component_matrices(basis: &FockBasis, ab: &ContactTable) -> (Array2<f64>, Array2<f64>) {
    let c = basis.cutoff();
    let dim = basis.dim();
    let mut h0 = Array2::<f64>::zeros((dim, dim));
    let mut hc = Array2::<f64>::zeros((dim, dim));
    for (ket, cfg) in basis.configs().iter().enumerate() {
        h0[[ket, ket]] = cfg.oscillator_energy();
        // sum_{a', j, l} I(a', a, j, l) a†_{a'} a_a b†_j b_l
        for a2 in 0..c {
            for l in [cfg.b.0, cfg.b.1] {
                for j in 0..c {
                    if (a2 + cfg.a + j + l) % 2 == 1 {
                        continue;
                    }
                    if let Some((sign, pair)) = hop(cfg.b, j, l) {
                        let bra = basis
                            .index_of(FockConfig { a: a2, b: pair })
                            .expect("pair within cutoff");
                        hc[[bra, ket]] += sign * ab.get(a2, cfg.a, j, l);
                    }
                }
            }
        }
    }
    (h0, hc)
}

fn build_two_component_with(p: FermionModelParams, tables: &TableSource) -> Result<ModelInstance> {
    let basis = FockBasis::new(p.cutoff_c)?;
    let ab = tables.get(p.mass_ratio, 1.0, p.cutoff_c, p.cutoff_c)?;
    let (h0, hc) = two_component_matrices(&basis, &ab);
    let dim = basis.dim();
    ModelInstance::new(
        HermitianOperator::from_real(h0)?,
        HermitianOperator::from_real(symmetrize(hc))?,
        BasisDescription::Fock(basis),
        vec![dim],
    )
}

fn build_three_component_with(
    p: ThreeComponentParams,
    tables: &TableSource,
) -> Result<ModelInstance> {
    let base = p.base;
    let basis = FockBasis::new(base.cutoff_c)?;
    let c = base.cutoff_c;
    let k = p.cutoff_k;
    let g = p.g_spectator;
    let ab = tables.get(base.mass_ratio, 1.0, c, c)?;
    let (h0_ab, hc_ab) = two_component_matrices(&basis, &ab);
    let hc_ab = HermitianOperator::from_real(symmetrize(hc_ab))?;

    let n_ab = basis.dim();
    let dim = n_ab * k;
    let mut h0 = Array2::<f64>::zeros((dim, dim));
    for ab_i in 0..n_ab {
        for sc in 0..k {
            let i = ab_i * k + sc;
            h0[[i, i]] = h0_ab[[ab_i, ab_i]] + sc as f64 + 0.5;
        }
    }
    if g != 0.0 {
        let ac = tables.get(base.mass_ratio, 1.0, c, k)?;
        let bc = tables.get(1.0, 1.0, c, k)?;
        for (ket_ab, cfg) in basis.configs().iter().enumerate() {
            for sc in 0..k {
                let ket = ket_ab * k + sc;
                for sc2 in 0..k {
                    // G δ(z - x): A hops, B pair untouched
                    for a2 in 0..c {
                        if (a2 + cfg.a + sc2 + sc) % 2 == 1 {
                            continue;
                        }
                        let bra_ab = basis
                            .index_of(FockConfig { a: a2, b: cfg.b })
                            .expect("valid config");
                        h0[[bra_ab * k + sc2, ket]] += g * ac.get(a2, cfg.a, sc2, sc);
                    }
                    // G Σ_i δ(z - y_i): one B fermion hops, A untouched
                    for l in [cfg.b.0, cfg.b.1] {
                        for j in 0..c {
                            if (j + l + sc2 + sc) % 2 == 1 {
                                continue;
                            }
                            if let Some((sign, pair)) = hop(cfg.b, j, l) {
                                let bra_ab = basis
                                    .index_of(FockConfig { a: cfg.a, b: pair })
                                    .expect("valid config");
                                h0[[bra_ab * k + sc2, ket]] += g * sign * bc.get(j, l, sc2, sc);
                            }
                        }
                    }
                }
            }
        }
    }
    ModelInstance::new(
        HermitianOperator::from_real(symmetrize(h0))?,
        hc_ab.tensor_identity(k),
        BasisDescription::FockWithSpectator {
            fock: basis,
            spectator_orbitals: k,
        },
        vec![n_ab, k],
    )
}

/// Removes last-bit asymmetry left by accumulation order.
fn symmetrize(m: Array2<f64>) -> Array2<f64> {
    let t = m.t().to_owned();
    (m + t) * 0.5
}

/// Ground states `|ini> = |Ψ0(g1)>` and `|tar> = |Ψ0(g2)>`.
pub fn make_scenario_states(
    model: &ModelInstance,
    g1: f64,
    g2: f64,
) -> Result<(StateVector, StateVector)> {
    let (_, ini) = ground_state(&model.hamiltonian(g1))?;
    let (_, tar) = ground_state(&model.hamiltonian(g2))?;
    Ok((ini, tar))
}

/// `|ab> ⊗ |orbital>` with the spectator index fastest.
pub fn embed_with_spectator(ab: &StateVector, k: usize, orbital: usize) -> Result<StateVector> {
    if orbital >= k {
        return Err(Error::validation(format!(
            "spectator orbital {orbital} out of range for K = {k}"
        )));
    }
    Ok(ab.tensor(&StateVector::basis(k, orbital)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigh, expectation, fidelity_mixed, fidelity_pure, partial_trace_last};
    use approx::assert_abs_diff_eq;

    fn fermions(c: usize, mu: f64) -> FermionModelParams {
        FermionModelParams {
            mass_ratio: mu,
            cutoff_c: c,
        }
    }

    #[test]
    fn two_qubit_drift_spectrum() {
        let m = build_two_qubit(TwoQubitParams { delta: 1.0 }).unwrap();
        let spec = eigh(&m.h0).unwrap();
        for (e, want) in spec.energies.iter().zip([-1.0, 0.0, 0.0, 1.0]) {
            assert_abs_diff_eq!(*e, want, epsilon = 1e-12);
        }
        let diag: Vec<f64> = (0..4).map(|i| m.hc.entries()[[i, i]].re).collect();
        assert_eq!(diag, vec![-1.0, 1.0, 1.0, -1.0]);
        assert!(m.h0.commutator_max(&m.hc).unwrap() > 0.1);
    }

    #[test]
    fn two_qubit_ground_energies() {
        let m = build_two_qubit(TwoQubitParams::default()).unwrap();
        let (e0, _) = ground_state(&m.hamiltonian(0.0)).unwrap();
        assert_abs_diff_eq!(e0, -1.0, epsilon = 1e-12);
        let (e4, tar) = ground_state(&m.hamiltonian(4.0)).unwrap();
        assert_abs_diff_eq!(e4, -4.7363, epsilon = 5e-4);
        assert_abs_diff_eq!(
            expectation(&m.hamiltonian(4.0), &tar).unwrap(),
            e4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_qubit_initial_overlap() {
        let m = build_two_qubit(TwoQubitParams::default()).unwrap();
        let (ini, tar) = make_scenario_states(&m, 0.0, 4.0).unwrap();
        assert_abs_diff_eq!(fidelity_pure(&ini, &tar).unwrap(), 0.7815, epsilon = 5e-4);
        let (a, b) = make_scenario_states(&m, 1.3, 1.3).unwrap();
        assert_abs_diff_eq!(fidelity_pure(&a, &b).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn noninteracting_fermions() {
        for c in [2, 3, 6] {
            let m = build_two_component(fermions(c, K40_LI6_MASS_RATIO)).unwrap();
            assert_eq!(m.dim(), c * c * (c - 1) / 2);
            let (e0, ini) = ground_state(&m.hamiltonian(0.0)).unwrap();
            assert_abs_diff_eq!(e0, 2.5, epsilon = 1e-12);
            assert_abs_diff_eq!(ini.amplitudes()[0].re, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fermion_operators_are_hermitian_with_parity_rule() {
        let m = build_two_component(fermions(5, K40_LI6_MASS_RATIO)).unwrap();
        let BasisDescription::Fock(basis) = &m.basis else {
            panic!()
        };
        for (i, ci) in basis.configs().iter().enumerate() {
            for (j, cj) in basis.configs().iter().enumerate() {
                let v = m.hc.entries()[[i, j]];
                assert_eq!(v, m.hc.entries()[[j, i]].conj());
                let change = ci.a + ci.b.0 + ci.b.1 + cj.a + cj.b.0 + cj.b.1;
                if change % 2 == 1 {
                    assert_eq!(v.norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_small_cutoff() {
        assert!(build_two_component(fermions(1, 1.0)).is_err());
        assert!(ModelSpec::TwoComponent(fermions(1, 1.0))
            .build(None)
            .is_err());
    }

    /// First-quantized oracle: `<Ψ'|δ(x-y1)+δ(x-y2)|Ψ> = 2 ∫∫ Ψ'(x,x,y) Ψ(x,x,y) dx dy`
    /// with `Ψ(x,y1,y2) = φ_a(x) [φ_b1(y1) φ_b2(y2) - φ_b2(y1) φ_b1(y2)] / √2`.
    #[test]
    fn control_elements_match_real_space_quadrature() {
        let mu = 1.0;
        let c = 3;
        let m = build_two_component(fermions(c, mu)).unwrap();
        let BasisDescription::Fock(basis) = &m.basis else {
            panic!()
        };
        let step = 0.02;
        let grid: Vec<f64> = (0..=800).map(|s| -8.0 + s as f64 * step).collect();
        let table: Vec<Vec<f64>> = (0..c)
            .map(|n| {
                grid.iter()
                    .map(|&x| ho_orbital(n, 1.0, x).unwrap())
                    .collect()
            })
            .collect();
        let psi = |cfg: &FockConfig, ix: usize, iy1: usize, iy2: usize| {
            table[cfg.a][ix]
                * (table[cfg.b.0][iy1] * table[cfg.b.1][iy2]
                    - table[cfg.b.1][iy1] * table[cfg.b.0][iy2])
                / 2f64.sqrt()
        };
        let pairs = [(0, 0), (0, 1), (0, 4), (2, 5), (1, 7), (3, 3), (8, 1)];
        for (bi, ki) in pairs {
            let (bra, ket) = (&basis.configs()[bi], &basis.configs()[ki]);
            let mut acc = 0.0;
            for ix in 0..grid.len() {
                for iy in 0..grid.len() {
                    acc += psi(bra, ix, ix, iy) * psi(ket, ix, ix, iy);
                }
            }
            let oracle = 2.0 * acc * step * step;
            assert_abs_diff_eq!(m.hc.entries()[[bi, ki]].re, oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn cutoff_convergence_of_interacting_ground_state() {
        // nested bases: the energy is variational in C, and the contact cusp
        // makes it converge slowly, so the check is on the state
        let ground = |c| {
            let m = build_two_component(fermions(c, K40_LI6_MASS_RATIO)).unwrap();
            let (e, v) = ground_state(&m.hamiltonian(1.0)).unwrap();
            let BasisDescription::Fock(basis) = m.basis else {
                unreachable!()
            };
            (e, v, basis)
        };
        let (e10, _, _) = ground(10);
        let (e12, v12, b12) = ground(12);
        let (e14, v14, b14) = ground(14);
        assert!(e10 >= e12 && e12 >= e14, "{e10} {e12} {e14}");
        assert!(e12 - e14 < e10 - e12);
        let mut overlap = num_complex::Complex64::new(0.0, 0.0);
        for (i, cfg) in b12.configs().iter().enumerate() {
            let j = b14.index_of(*cfg).unwrap();
            overlap += v12.amplitudes()[i].conj() * v14.amplitudes()[j];
        }
        let fid = overlap.norm_sqr();
        assert!(1.0 - fid < 1e-3, "ground-state fidelity C=12 vs 14: {fid}");
    }

    fn three(c: usize, k: usize, g: f64) -> ThreeComponentParams {
        ThreeComponentParams {
            base: fermions(c, K40_LI6_MASS_RATIO),
            cutoff_k: k,
            g_spectator: g,
        }
    }

    #[test]
    fn three_component_without_coupling_factorizes() {
        let m3 = build_three_component(three(4, 2, 0.0)).unwrap();
        let m2 = build_two_component(fermions(4, K40_LI6_MASS_RATIO)).unwrap();
        assert_eq!(m3.dim(), m2.dim() * 2);
        for i in 0..m2.dim() {
            for j in 0..m2.dim() {
                for s in 0..2 {
                    assert_eq!(
                        m3.h0.entries()[[i * 2 + s, j * 2 + s]].re,
                        m2.h0.entries()[[i, j]].re + if i == j { s as f64 + 0.5 } else { 0.0 }
                    );
                    assert_eq!(
                        m3.hc.entries()[[i * 2 + s, j * 2 + s]],
                        m2.hc.entries()[[i, j]]
                    );
                }
            }
        }
        let g = 0.7;
        let (_, gs3) = ground_state(&m3.hamiltonian(g)).unwrap();
        let (_, gs2) = ground_state(&m2.hamiltonian(g)).unwrap();
        let rho = partial_trace_last(&gs3, m2.dim(), 2).unwrap();
        assert_abs_diff_eq!(rho.purity(), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(
            fidelity_mixed(&rho, &gs2).unwrap().fidelity,
            1.0,
            epsilon = 1e-10
        );
        let proj = crate::linalg::DensityMatrix::pure(&gs2);
        let diff = (rho.entries() - proj.entries())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }

    #[test]
    fn three_component_dimensions_and_repulsion() {
        assert_eq!(14 * 91 * 2, 2548);
        let e = |g| {
            let m = build_three_component(three(4, 2, g)).unwrap();
            assert!(m.h0.is_real());
            ground_state(&m.hamiltonian(0.0)).unwrap().0
        };
        assert!(e(0.1) < e(0.2));
    }

    #[test]
    fn three_component_spectator_coupling_matches_first_quantized_terms() {
        // single off-diagonal check: A-spectator term between (0,{0,1},0) and (2,{0,1},0)
        let g = 0.3;
        let m = build_three_component(three(3, 2, g)).unwrap();
        let BasisDescription::FockWithSpectator { fock, .. } = &m.basis else {
            panic!()
        };
        let ket = fock.index_of(FockConfig { a: 0, b: (0, 1) }).unwrap() * 2;
        let bra = fock.index_of(FockConfig { a: 2, b: (0, 1) }).unwrap() * 2;
        let want = g * delta_integral(2, 0, 0, 0, K40_LI6_MASS_RATIO, 1.0).unwrap();
        assert_abs_diff_eq!(m.h0.entries()[[bra, ket]].re, want, epsilon = 1e-14);
        // B-spectator: (0,{0,1},0) -> (0,{1,2},0) via b†_2 b_0 with sign -1
        let bra_b = fock.index_of(FockConfig { a: 0, b: (1, 2) }).unwrap() * 2;
        let want_b = -g * delta_integral(2, 0, 0, 0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(m.h0.entries()[[bra_b, ket]].re, want_b, epsilon = 1e-14);
    }

    #[test]
    fn spectator_embedding() {
        let m = build_two_component(fermions(14, K40_LI6_MASS_RATIO)).unwrap();
        let (ini, _) = make_scenario_states(&m, 0.0, 0.0).unwrap();
        let e0 = embed_with_spectator(&ini, 2, 0).unwrap();
        let e1 = embed_with_spectator(&ini, 2, 1).unwrap();
        assert_eq!(e0.dim(), 2548);
        assert_eq!(e0.inner(&e1).unwrap().norm(), 0.0);
        let rho = partial_trace_last(&e0, 1274, 2).unwrap();
        assert_abs_diff_eq!(rho.purity(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            fidelity_mixed(&rho, &ini).unwrap().fidelity,
            1.0,
            epsilon = 1e-12
        );
        assert!(embed_with_spectator(&ini, 2, 2).is_err());
    }

    #[test]
    fn shifted_model_has_the_same_hamiltonian() {
        let m = build_two_qubit(TwoQubitParams::default()).unwrap();
        let s = m.shifted(0.3);
        let a = m.hamiltonian(0.8);
        let b = s.hamiltonian(0.5);
        let diff = (a.entries() - b.entries())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-15);
    }
}
