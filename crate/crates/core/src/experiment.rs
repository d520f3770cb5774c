//! Complete run descriptions: data generation, initial network and training options.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{gen_l2_dataset, gen_noisy_dataset, GenConfig, NoiseSpec};
use crate::dataset::DataSet;
use crate::error::{Error, Result};
use crate::inner::{Gamma, InnerOptions, Regularizer};
use crate::mlp::{Activation, Architecture, Network, WeightVector};
use crate::outer::{bb_solve_with, BbIterate, OuterConfig, OuterEvaluation, TrainReport};

/// Offset between the data seed and the seed of the noise realization.
pub const NOISE_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: GenConfig,
    /// Noisy states when present; otherwise pairs are generated with the quadratic
    /// regularizer `c_reg ‖u‖²`.
    pub noise: Option<NoiseSpec>,
    /// Hidden widths; the network is `[n_in, hidden..., 1]`.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub gamma: Gamma,
    /// Standard deviation of the i.i.d. normal initial weights, drawn with `train.seed`.
    pub init_std: f64,
    /// Feed `u − c` to the network, `c` being the midpoint of the sampling range.
    pub center_input: bool,
    pub train: OuterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GenConfig::default(),
            noise: None,
            hidden: vec![8, 8],
            activation: Activation::Tanh,
            gamma: Gamma::Identity,
            init_std: 1e-2,
            center_input: false,
            train: OuterConfig::default(),
        }
    }
}

impl RunConfig {
    /// Rediscovering the quadratic regularizer from `K = 5` scalar-control pairs.
    pub fn experiment1() -> Self {
        Self {
            data: GenConfig {
                k: 5,
                n_in: 1,
                f: 20.0,
                ..GenConfig::default()
            },
            train: OuterConfig {
                max_steps: 40,
                ..OuterConfig::default()
            },
            ..Self::default()
        }
    }

    /// Compensating Gaussian noise on the states, `K = 10` pairs with 10 control groups.
    pub fn experiment2() -> Self {
        Self {
            data: GenConfig {
                k: 10,
                n_in: 10,
                f: 20.0,
                range: (0.95, 1.05),
                ..GenConfig::default()
            },
            noise: Some(NoiseSpec {
                sigma: Some(0.06),
                seed: NOISE_SEED_OFFSET,
            }),
            center_input: true,
            train: OuterConfig {
                max_steps: 40,
                inner: InnerOptions {
                    max_iter: 20_000,
                    ..InnerOptions::default()
                },
                ..OuterConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "experiment1" => Some(Self::experiment1()),
            "experiment2" => Some(Self::experiment2()),
            _ => None,
        }
    }

    /// Reseeds data, noise and initial weights from one integer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        if let Some(noise) = &mut self.noise {
            noise.seed = seed.wrapping_add(NOISE_SEED_OFFSET);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if let Some(noise) = &self.noise {
            if let Some(sigma) = noise.sigma {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!(
                        "sigma must be nonnegative, got {sigma}"
                    )));
                }
            }
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "init_std must be nonnegative, got {}",
                self.init_std
            )));
        }
        self.architecture()?;
        self.train.validate()
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let n_out = match self.gamma {
            Gamma::Identity => 1,
            Gamma::HalfSquaredNorm => self.hidden.last().copied().unwrap_or(self.data.n_in),
        };
        let mut widths = vec![self.data.n_in];
        widths.extend(&self.hidden);
        widths.push(n_out);
        Architecture::new(widths, self.activation)
    }

    pub fn dataset(&self) -> Result<DataSet> {
        self.validate()?;
        match &self.noise {
            Some(noise) => gen_noisy_dataset(&self.data, noise),
            None => gen_l2_dataset(&self.data),
        }
    }

    /// Random initial regularizer.
    pub fn initial_regularizer(&self) -> Result<Regularizer> {
        let arch = self.architecture()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let w = WeightVector::random_normal(&arch, self.init_std, &mut rng);
        let reg = Regularizer::new(Network::new(arch, w)?, self.gamma)?;
        if self.center_input {
            let (lo, hi) = self.data.range;
            reg.with_center(DVector::from_element(self.data.n_in, 0.5 * (lo + hi)))
        } else {
            Ok(reg)
        }
    }

    /// Trains from [`RunConfig::initial_regularizer`] on `dataset`.
    pub fn train<F>(&self, dataset: &DataSet, progress: F) -> Result<TrainReport>
    where
        F: FnMut(usize, &BbIterate<OuterEvaluation>),
    {
        self.validate()?;
        bb_solve_with(dataset, &self.initial_regularizer()?, &self.train, progress)
    }
}
