//! Batch evaluation over sampled states. Samples are drawn sequentially from
//! a seeded generator, then mapped either sequentially or with rayon; output
//! order always matches input order, so both paths give identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::system::{sample_shell, DomainBox, ExtendedState, Vector};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Executor {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls
    /// back to sequential evaluation.
    #[default]
    Parallel,
}

impl Executor {
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Executor::Sequential => items.iter().map(f).collect(),
            Executor::Parallel => {
                #[cfg(feature = "parallel")]
                {
                    use rayon::prelude::*;
                    items.par_iter().map(f).collect()
                }
                #[cfg(not(feature = "parallel"))]
                {
                    items.iter().map(f).collect()
                }
            }
        }
    }

    pub fn try_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

/// How the controller state `x_v` is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ControllerStateSampling {
    Zero,
    /// Each component uniform in `[-half_width, half_width]`.
    Box {
        half_width: f64,
    },
    /// Norm uniform in `[r_min, r_max]`, direction uniform.
    Shell {
        r_min: f64,
        r_max: f64,
    },
}

impl Default for ControllerStateSampling {
    fn default() -> Self {
        Self::Shell { r_min: 0.1, r_max: 1.0 }
    }
}

pub fn sample_states(
    domain: &DomainBox,
    x_v: ControllerStateSampling,
    count: usize,
    seed: u64,
) -> Result<Vec<ExtendedState>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = domain.dim();
    (0..count)
        .map(|_| {
            let q = domain.sample_q(&mut rng);
            let p = domain.sample_p(&mut rng);
            let xv = match x_v {
                ControllerStateSampling::Zero => Vector::zeros(n),
                ControllerStateSampling::Box { half_width } => {
                    let unit = DomainBox::around(&Vector::zeros(n), half_width, 0.0);
                    unit.sample_q(&mut rng)
                }
                ControllerStateSampling::Shell { r_min, r_max } => sample_shell(&mut rng, n, r_min, r_max),
            };
            ExtendedState::new(q, p, xv)
        })
        .collect()
}
