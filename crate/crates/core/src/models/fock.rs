//! Fock basis for one A fermion and two identical B fermions.
//!
//! A configuration `(a, (b1, b2))` stands for `a†_a b†_{b1} b†_{b2} |0>` with
//! `b1 < b2`. Configurations are ordered lexicographically with the A orbital
//! slow and the B pair fast.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FockConfig {
    pub a: usize,
    pub b: (usize, usize),
}

impl FockConfig {
    /// Sum of single-particle oscillator energies, `(n + 1/2)` each.
    pub fn oscillator_energy(&self) -> f64 {
        (self.a + self.b.0 + self.b.1) as f64 + 1.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FockBasis {
    cutoff: usize,
    configs: Vec<FockConfig>,
    pair_slot: Vec<usize>,
}

impl FockBasis {
    pub fn new(cutoff: usize) -> Result<Self> {
        if cutoff < 2 {
            return Err(Error::validation(format!(
                "cutoff C = {cutoff} too small: two B fermions need at least two orbitals"
            )));
        }
        let mut pair_slot = vec![usize::MAX; cutoff * cutoff];
        let mut n_pairs = 0;
        for b1 in 0..cutoff {
            for b2 in (b1 + 1)..cutoff {
                pair_slot[b1 * cutoff + b2] = n_pairs;
                n_pairs += 1;
            }
        }
        let mut configs = Vec::with_capacity(cutoff * n_pairs);
        for a in 0..cutoff {
            for b1 in 0..cutoff {
                for b2 in (b1 + 1)..cutoff {
                    configs.push(FockConfig { a, b: (b1, b2) });
                }
            }
        }
        Ok(Self {
            cutoff,
            configs,
            pair_slot,
        })
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn dim(&self) -> usize {
        self.configs.len()
    }

    pub fn pair_count(&self) -> usize {
        self.cutoff * (self.cutoff - 1) / 2
    }

    pub fn configs(&self) -> &[FockConfig] {
        &self.configs
    }

    pub fn index_of(&self, cfg: FockConfig) -> Option<usize> {
        let (b1, b2) = cfg.b;
        if cfg.a >= self.cutoff || b1 >= b2 || b2 >= self.cutoff {
            return None;
        }
        Some(cfg.a * self.pair_count() + self.pair_slot[b1 * self.cutoff + b2])
    }
}

/// Applies `b†_create b_annihilate` to the two-fermion state `|pair>`.
///
/// Annihilating the orbital at position `p` of the ordered pair contributes
/// `(-1)^p`; creating into a one-particle state contributes `(-1)^(number of
/// occupied orbitals below the new one)`. Returns `None` when the result
/// vanishes.
pub fn hop(
    pair: (usize, usize),
    create: usize,
    annihilate: usize,
) -> Option<(f64, (usize, usize))> {
    let (b1, b2) = pair;
    let (sign_out, rest) = if annihilate == b1 {
        (1.0, b2)
    } else if annihilate == b2 {
        (-1.0, b1)
    } else {
        return None;
    };
    if create == rest {
        return None;
    }
    let (sign_in, new_pair) = if create < rest {
        (1.0, (create, rest))
    } else {
        (-1.0, (rest, create))
    };
    Some((sign_out * sign_in, new_pair))
}
