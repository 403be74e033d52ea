//! Fixtures shared by the benchmarks.

use qramp_core::models::{FermionModelParams, TwoQubitParams, K40_LI6_MASS_RATIO};
use qramp_core::{ControlProblem, ControlProtocol, ModelSpec, RangeScenario, Scenario, Tolerances};

pub fn qubit_problem() -> ControlProblem {
    let range = RangeScenario::new(-2.0, 2.0).expect("valid range");
    let s = Scenario::new(
        ModelSpec::TwoQubit(TwoQubitParams::default()),
        0.0,
        4.0,
        range,
        0.99,
    )
    .expect("valid");
    ControlProblem::new(&s, Tolerances::default(), None).expect("builds")
}

pub fn fermion_problem(cutoff_c: usize) -> ControlProblem {
    let range = RangeScenario::new(-0.5, 0.5).expect("valid range");
    let model = ModelSpec::TwoComponent(FermionModelParams {
        mass_ratio: K40_LI6_MASS_RATIO,
        cutoff_c,
    });
    let s = Scenario::new(model, 0.0, 2.0, range, 0.99).expect("valid");
    ControlProblem::new(&s, Tolerances::default(), None).expect("builds")
}

/// Deterministic wiggly protocol spanning the range.
pub fn wiggly_protocol(duration: f64, m: usize, range: RangeScenario) -> ControlProtocol {
    let knots = (0..m)
        .map(|i| {
            let x = (1.7 * i as f64 + 0.3).sin();
            range.g_min() + 0.5 * (x + 1.0) * range.width()
        })
        .collect();
    ControlProtocol::new(duration, knots, range).expect("knots in range")
}
