//! Seeded synthetic data sets.
//!
//! Randomness comes from ChaCha8 seeded with the configured seed; datum `k` draws
//! from stream `k`, so every pair depends only on `(seed, k)`.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataSet, Pair};
use crate::error::{Error, Result};
use crate::fem::{solve_state, Bounds, ControlSpace, Mesh, ProblemData};
use crate::inner::{nesterov_solve, InnerOptions, InnerProblem, InnerStatus, Regularizer};

/// Projected-gradient bound met by every generated `û_k`.
pub const STATIONARITY_GUARANTEE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Number of pairs `K`.
    pub k: usize,
    /// Control groups per datum.
    pub n_in: usize,
    /// Mesh cells `N`.
    pub cells: usize,
    pub bounds: Bounds,
    /// Uniform sampling interval of the ground-truth controls.
    pub range: (f64, f64),
    /// Constant source term.
    pub f: f64,
    /// Dirichlet values `(g_l, g_r)`.
    pub g: (f64, f64),
    pub seed: u64,
    /// Coefficient `c` of the generating regularizer `c‖u‖²`.
    pub c_reg: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n_in: 1,
            cells: 100,
            bounds: Bounds::default(),
            range: (0.5, 1.5),
            f: 1.0,
            g: (0.0, 0.0),
            seed: 0,
            c_reg: 1.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.n_in == 0 || self.n_in > self.cells {
            return Err(Error::Config(format!(
                "n_in = {} must lie in 1..={}",
                self.n_in, self.cells
            )));
        }
        Bounds::new(self.bounds.lower, self.bounds.upper)?;
        let (lo, hi) = self.range;
        if !(lo <= hi && self.bounds.contains(lo) && self.bounds.contains(hi)) {
            return Err(Error::Config(format!(
                "sampling range [{lo}, {hi}] is not inside [{}, {}]",
                self.bounds.lower, self.bounds.upper
            )));
        }
        if !(self.c_reg >= 0.0
            && self.f.is_finite()
            && self.g.0.is_finite()
            && self.g.1.is_finite())
        {
            return Err(Error::Config("invalid problem data or c_reg".into()));
        }
        Ok(())
    }

    pub fn space(&self) -> Result<ControlSpace> {
        ControlSpace::blocks(Mesh::new(self.cells)?, self.n_in, self.bounds)
    }

    pub fn problem(&self) -> Result<ProblemData> {
        Ok(ProblemData::uniform(Mesh::new(self.cells)?, self.f, self.g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct NoiseSpec {
    /// Absolute standard deviation; `None` means `0.01 · max_k ‖y_true,k‖_∞`.
    pub sigma: Option<f64>,
    pub seed: u64,
}

fn stream(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// `K` ground-truth controls with i.i.d. uniform group values in `cfg.range`.
pub fn sample_controls(cfg: &GenConfig) -> Result<Vec<DVector<f64>>> {
    cfg.validate()?;
    let (lo, hi) = cfg.range;
    Ok((0..cfg.k)
        .map(|k| {
            let mut rng = stream(cfg.seed, k);
            DVector::from_fn(cfg.n_in, |_, _| {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            })
        })
        .collect())
}

/// Pairs `(𝕊(u*_k), û_k)` where `û_k` solves the inner problem with the regularizer
/// `c_reg‖u‖²` and target `𝕊(u*_k)`.
pub fn gen_l2_dataset(cfg: &GenConfig) -> Result<DataSet> {
    let space = cfg.space()?;
    let data = cfg.problem()?;
    let truth = sample_controls(cfg)?;
    let reg = Regularizer::quadratic(cfg.n_in, cfg.c_reg);
    let opts = InnerOptions {
        tol: 1e-12,
        max_iter: 100_000,
        ..Default::default()
    };
    let pairs = truth
        .par_iter()
        .map(|u_star| {
            let z_hat = solve_state(&space, u_star, &data)?;
            let prob = InnerProblem::new(&space, &data, &z_hat, &reg)?;
            let sol = nesterov_solve(&prob, u_star, &opts)?;
            // the 1e-12 target can sit below the rounding floor of the gradient; a
            // stagnated solve is kept when it still meets the 1e-10 guarantee
            let stalled_ok = sol.status == InnerStatus::Stagnated
                && sol.projected_grad_norm <= STATIONARITY_GUARANTEE;
            if !(sol.converged() || stalled_ok) {
                return Err(Error::NonConvergence {
                    iterations: sol.iterations,
                    residual: sol.projected_grad_norm,
                });
            }
            Ok(Pair {
                z_hat,
                u_hat: sol.u,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DataSet::new(space, data, pairs)
}

/// Pairs `(𝕊(u_k) + noise, u_k)` with Gaussian noise on the interior nodes.
pub fn gen_noisy_dataset(cfg: &GenConfig, noise: &NoiseSpec) -> Result<DataSet> {
    let space = cfg.space()?;
    let data = cfg.problem()?;
    let truth = sample_controls(cfg)?;
    let states = truth
        .iter()
        .map(|u| solve_state(&space, u, &data))
        .collect::<Result<Vec<_>>>()?;
    let sigma = match noise.sigma {
        Some(s) if s >= 0.0 && s.is_finite() => s,
        Some(s) => {
            return Err(Error::Config(format!(
                "noise level must be nonnegative, got {s}"
            )))
        }
        None => 0.01 * states.iter().map(|y| y.amax()).fold(0.0, f64::max),
    };
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let pairs = truth
        .into_iter()
        .zip(states)
        .enumerate()
        .map(|(k, (u, mut y))| {
            if sigma > 0.0 {
                let mut rng = stream(noise.seed, k);
                let n = y.len();
                for i in 1..n - 1 {
                    y[i] += normal.sample(&mut rng);
                }
            }
            Pair { z_hat: y, u_hat: u }
        })
        .collect();
    DataSet::new(space, data, pairs)
}
