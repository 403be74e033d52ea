//! Monte-Carlo robustness of optimized protocols under Gaussian knot noise.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlProtocol, RangeScenario};
use crate::error::{Error, Result};
use crate::optimizer::ControlProblem;

/// Name of the generator recorded in every report.
pub const NOISE_RNG: &str = "ChaCha8 (seed_from_u64(seed), stream = realization index)";

/// More failed realizations than this fraction invalidate a report.
pub const MAX_FAILED_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub n_realizations: usize,
    pub seed: u64,
    #[serde(default)]
    pub clamp_noisy: bool,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::validation(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.n_realizations == 0 {
            return Err(Error::validation("need at least one noise realization"));
        }
        Ok(())
    }
}

/// Ensemble statistics for one `sigma`.
///
/// `samples` holds the final fidelities of the realizations that propagated,
/// in realization order; `failed` lists the indices of those that did not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub sigma: f64,
    pub mean_f: f64,
    pub std_f: f64,
    pub sem_f: f64,
    pub samples: Vec<f64>,
    pub failed: Vec<usize>,
    pub seed: u64,
    pub clamp_noisy: bool,
    pub rng: String,
}

impl NoiseReport {
    /// Recomputes the aggregates from `samples` and compares them exactly.
    pub fn is_consistent(&self) -> bool {
        let (mean, std, sem) = summarize(&self.samples);
        mean == self.mean_f && std == self.std_f && sem == self.sem_f
    }
}

/// Mean, sample standard deviation and standard error of the mean.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    // shifted by the first sample so identical samples average exactly
    let shift = samples[0];
    let mean = shift + samples.iter().map(|x| x - shift).sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    (mean, std, std / (n as f64).sqrt())
}

/// Adds i.i.d. `Normal(0, sigma^2)` to every knot, clamping to `clamp` when
/// given.
pub fn perturb_knots<R: Rng + ?Sized>(
    knots: &[f64],
    sigma: f64,
    clamp: Option<RangeScenario>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::validation(format!("noise sigma {sigma}: {e}")))?;
    Ok(knots
        .iter()
        .map(|&k| {
            let x = if sigma == 0.0 {
                k
            } else {
                k + normal.sample(rng)
            };
            clamp.map_or(x, |r| r.clamp(x))
        })
        .collect())
}

/// Generator for realization `index`; depends only on `(seed, index)`.
pub fn realization_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Final fidelities of `n_realizations` perturbed copies of `protocol`.
pub fn noise_ensemble(
    problem: &ControlProblem,
    protocol: &ControlProtocol,
    cfg: &NoiseConfig,
) -> Result<NoiseReport> {
    cfg.validate()?;
    let range = protocol.range();
    let clamp = cfg.clamp_noisy.then_some(range);
    let results: Vec<Result<f64>> = (0..cfg.n_realizations)
        .into_par_iter()
        .map(|i| {
            let mut rng = realization_rng(cfg.seed, i);
            let knots = perturb_knots(protocol.knots(), cfg.sigma, clamp, &mut rng)?;
            let noisy = ControlProtocol::with_unbounded_knots(protocol.duration(), knots, range)?;
            problem.fidelity(&noisy)
        })
        .collect();

    let mut samples = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    let mut last_err = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(f) => samples.push(f),
            Err(e) => {
                failed.push(i);
                last_err = Some(e);
            }
        }
    }
    if failed.len() as f64 > MAX_FAILED_FRACTION * cfg.n_realizations as f64 {
        return Err(Error::Numerical(format!(
            "{} of {} noise realizations failed at sigma = {} (last: {})",
            failed.len(),
            cfg.n_realizations,
            cfg.sigma,
            last_err.map_or_else(String::new, |e| e.to_string())
        )));
    }
    let (mean_f, std_f, sem_f) = summarize(&samples);
    Ok(NoiseReport {
        sigma: cfg.sigma,
        mean_f,
        std_f,
        sem_f,
        samples,
        failed,
        seed: cfg.seed,
        clamp_noisy: cfg.clamp_noisy,
        rng: NOISE_RNG.to_string(),
    })
}

/// One ensemble per `sigma`, sharing seed and realization count.
pub fn noise_sweep(
    problem: &ControlProblem,
    protocol: &ControlProtocol,
    sigmas: &[f64],
    n_realizations: usize,
    seed: u64,
    clamp_noisy: bool,
) -> Result<Vec<NoiseReport>> {
    sigmas
        .iter()
        .map(|&sigma| {
            noise_ensemble(
                problem,
                protocol,
                &NoiseConfig {
                    sigma,
                    n_realizations,
                    seed,
                    clamp_noisy,
                },
            )
        })
        .collect()
}

/// `sigma,mean_f,std_f,sem_f`, one row per report.
pub fn write_sweep_csv<W: Write>(reports: &[NoiseReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "sigma,mean_f,std_f,sem_f")?;
    for r in reports {
        writeln!(w, "{},{},{},{}", r.sigma, r.mean_f, r.std_f, r.sem_f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, TwoQubitParams};
    use crate::optimizer::Scenario;
    use crate::propagator::Tolerances;
    use approx::assert_abs_diff_eq;

    fn qubit_problem() -> ControlProblem {
        let s = Scenario::new(
            ModelSpec::TwoQubit(TwoQubitParams::default()),
            0.0,
            4.0,
            RangeScenario::new(-2.0, 2.0).unwrap(),
            0.99,
        )
        .unwrap();
        ControlProblem::new(&s, Tolerances::default(), None).unwrap()
    }

    fn protocol() -> ControlProtocol {
        ControlProtocol::new(
            2.0,
            vec![0.5, 1.8, -1.0, 2.0, 1.2],
            RangeScenario::new(-2.0, 2.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_sigma_leaves_knots_alone() {
        let knots = [0.3, -1.7, 2.0];
        let mut rng = realization_rng(1, 0);
        assert_eq!(perturb_knots(&knots, 0.0, None, &mut rng).unwrap(), knots);
    }

    #[test]
    fn perturbation_has_the_requested_spread() {
        let sigma = 0.06;
        let mut rng = realization_rng(7, 0);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| perturb_knots(&[0.25], sigma, None, &mut rng).unwrap()[0] - 0.25)
            .collect();
        let (mean, std, _) = summarize(&draws);
        assert!((std / sigma - 1.0).abs() < 0.02, "std {std}");
        assert!(mean.abs() < 5.0 * sigma / (draws.len() as f64).sqrt());
    }

    #[test]
    fn clamped_perturbation_stays_in_range() {
        let r = RangeScenario::new(-0.5, 0.5).unwrap();
        let mut rng = realization_rng(3, 0);
        for _ in 0..1000 {
            let k = perturb_knots(&[0.4, -0.5, 0.0], 5.0, Some(r), &mut rng).unwrap();
            assert!(k.iter().all(|x| r.contains(*x)));
        }
    }

    #[test]
    fn summary_statistics() {
        let (m, s, e) = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_abs_diff_eq!(s, (5.0_f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(e, (5.0_f64 / 3.0).sqrt() / 2.0, epsilon = 1e-15);
        assert_eq!(summarize(&[0.7]), (0.7, 0.0, 0.0));
    }

    #[test]
    fn zero_sigma_reproduces_the_noiseless_fidelity() {
        let problem = qubit_problem();
        let p = protocol();
        let f = problem.fidelity(&p).unwrap();
        let cfg = NoiseConfig {
            sigma: 0.0,
            n_realizations: 3,
            seed: 0,
            clamp_noisy: false,
        };
        let rep = noise_ensemble(&problem, &p, &cfg).unwrap();
        assert_eq!(rep.mean_f, f);
        assert_eq!(rep.std_f, 0.0);
        assert!(rep.samples.iter().all(|&s| s == f));
    }

    #[test]
    fn ensembles_are_reproducible_and_keyed_by_realization() {
        let problem = qubit_problem();
        let p = protocol();
        let cfg = NoiseConfig {
            sigma: 0.1,
            n_realizations: 6,
            seed: 11,
            clamp_noisy: false,
        };
        let a = noise_ensemble(&problem, &p, &cfg).unwrap();
        let b = noise_ensemble(&problem, &p, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.is_consistent());
        assert!(a.failed.is_empty());
        // the first realizations do not depend on how many follow
        let short = noise_ensemble(
            &problem,
            &p,
            &NoiseConfig {
                n_realizations: 2,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(short.samples[..], a.samples[..2]);
        let other = noise_ensemble(&problem, &p, &NoiseConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(other.samples, a.samples);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let problem = qubit_problem();
        let p = protocol();
        let bad = NoiseConfig {
            sigma: -0.1,
            n_realizations: 5,
            seed: 0,
            clamp_noisy: false,
        };
        assert!(matches!(
            noise_ensemble(&problem, &p, &bad),
            Err(Error::Validation(_))
        ));
        let empty = NoiseConfig {
            sigma: 0.1,
            n_realizations: 0,
            seed: 0,
            clamp_noisy: false,
        };
        assert!(noise_ensemble(&problem, &p, &empty).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let rep = NoiseReport {
            sigma: 0.02,
            mean_f: 0.5,
            std_f: 0.25,
            sem_f: 0.125,
            samples: vec![],
            failed: vec![],
            seed: 0,
            clamp_noisy: false,
            rng: NOISE_RNG.into(),
        };
        let mut buf = Vec::new();
        write_sweep_csv(&[rep], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sigma,mean_f,std_f,sem_f\n0.02,0.5,0.25,0.125\n"
        );
    }

    #[test]
    fn report_round_trips_through_json() {
        let problem = qubit_problem();
        let cfg = NoiseConfig {
            sigma: 0.05,
            n_realizations: 4,
            seed: 2,
            clamp_noisy: true,
        };
        let rep = noise_ensemble(&problem, &protocol(), &cfg).unwrap();
        let back: NoiseReport =
            serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back, rep);
        assert!(back.is_consistent());
    }
}
