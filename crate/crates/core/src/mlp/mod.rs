//! Feedforward networks used as regularizers.
//!
//! A network with `L` layers maps `u ∈ R^{n_in}` to `r(w, u) ∈ R^{n_out}` through
//!
//! ```text
//! r¹ = A₁ u + b₁,    r^{ℓ+1} = A_{ℓ+1} ρ(r^ℓ) + b_{ℓ+1},    r(w, u) = r^L
//! ```
//!
//! where `ρ` is applied coordinate-wise. All derivatives (first and second order, with
//! respect to the input and to the weights) are computed analytically from a stored
//! [`ForwardTape`], see [`derivatives`].

pub mod derivatives;
mod io;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use derivatives::{forward, hessian_uu, jacobian_u, jacobian_w, mixed_uw, ForwardTape};
pub use io::WeightFile;

/// Coordinate-wise activation. Every kind is C² with `sup |ρ'| = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Identity => x,
        }
    }

    pub fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(x),
            Activation::Identity => 1.0,
        }
    }

    pub fn d2(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 0.0,
        }
    }

    /// `‖ρ'‖_∞` over the real line.
    pub fn sup_d1(self) -> f64 {
        1.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Layer widths `[n_in, n_2, …, n_L, n_out]` and the activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
    activation: Activation,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Architecture(format!(
                "need at least two layers (three widths), got {:?}",
                widths
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Architecture(format!(
                "all widths must be positive, got {:?}",
                widths
            )));
        }
        Ok(Self { widths, activation })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of affine layers `L`.
    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_in(&self) -> usize {
        self.widths[0]
    }

    pub fn n_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `Σ_{ℓ=1}^{L-1} n_ℓ`, the exponent of `‖ρ'‖_∞` in the Lipschitz estimate.
    pub fn hidden_size(&self) -> usize {
        self.widths[..self.layers() - 1].iter().sum()
    }

    /// Total number of scalar weights.
    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[1] * p[0] + p[1]).sum()
    }

    /// Checks that `w` has the shapes of this architecture.
    pub fn check(&self, w: &WeightVector) -> Result<()> {
        if w.layers.len() != self.layers() {
            return Err(Error::Dimension {
                what: "layer count",
                expected: self.layers(),
                found: w.layers.len(),
            });
        }
        for (layer, dims) in w.layers.iter().zip(self.widths.windows(2)) {
            layer.check_shape(dims[0], dims[1])?;
        }
        Ok(())
    }
}

/// One affine map `z ↦ A z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            a: DMatrix::zeros(n_out, n_in),
            b: DVector::zeros(n_out),
        }
    }

    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b
    }

    fn check_shape(&self, n_in: usize, n_out: usize) -> Result<()> {
        if self.a.ncols() != n_in {
            return Err(Error::Dimension {
                what: "layer matrix columns",
                expected: n_in,
                found: self.a.ncols(),
            });
        }
        if self.a.nrows() != n_out {
            return Err(Error::Dimension {
                what: "layer matrix rows",
                expected: n_out,
                found: self.a.nrows(),
            });
        }
        if self.b.len() != n_out {
            return Err(Error::Dimension {
                what: "layer bias",
                expected: n_out,
                found: self.b.len(),
            });
        }
        Ok(())
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.a.shape() == other.a.shape() && self.b.len() == other.b.len()
    }
}

/// Network weights `w = (A_ℓ, b_ℓ)_{ℓ=1..L}`.
///
/// The vector-space operations (`dot`, `norm`, `axpy`) use the Euclidean structure
/// `‖w‖² = Σ_ℓ ‖A_ℓ‖²_F + |b_ℓ|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub layers: Vec<Layer>,
}

impl WeightVector {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: arch
                .widths
                .windows(2)
                .map(|p| Layer::zeros(p[0], p[1]))
                .collect(),
        }
    }

    /// I.i.d. `N(0, std²)` entries.
    pub fn random_normal<R: Rng + ?Sized>(arch: &Architecture, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        let mut w = Self::zeros(arch);
        for layer in &mut w.layers {
            for x in layer.a.iter_mut().chain(layer.b.iter_mut()) {
                *x = normal.sample(rng);
            }
        }
        w
    }

    /// I.i.d. uniform entries in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        arch: &Architecture,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = Self::zeros(arch);
        for layer in &mut w.layers {
            for x in layer.a.iter_mut().chain(layer.b.iter_mut()) {
                *x = rng.random_range(lo..hi);
            }
        }
        w
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_compatible(&self, other: &WeightVector) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::Architecture(
                "weight vectors have different shapes".into(),
            ));
        }
        Ok(())
    }

    pub fn dot(&self, other: &WeightVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(x, y)| x.a.dot(&y.a) + x.b.dot(&y.b))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.a.norm_squared() + l.b.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Returns `self + alpha · other`.
    pub fn axpy(&self, alpha: f64, other: &WeightVector) -> Result<WeightVector> {
        self.check_compatible(other)?;
        Ok(WeightVector {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(x, y)| Layer {
                    a: &x.a + &y.a * alpha,
                    b: &x.b + &y.b * alpha,
                })
                .collect(),
        })
    }

    pub fn scaled(&self, alpha: f64) -> WeightVector {
        WeightVector {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    a: &l.a * alpha,
                    b: &l.b * alpha,
                })
                .collect(),
        }
    }

    /// Entries flattened layer by layer, `A` row-major followed by `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            for i in 0..l.a.nrows() {
                out.extend(l.a.row(i).iter());
            }
            out.extend(l.b.iter());
        }
        out
    }

    /// Inverse of [`WeightVector::to_flat`].
    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<WeightVector> {
        if flat.len() != arch.parameter_count() {
            return Err(Error::Dimension {
                what: "flat weight vector",
                expected: arch.parameter_count(),
                found: flat.len(),
            });
        }
        let mut w = WeightVector::zeros(arch);
        let mut it = flat.iter().copied();
        for l in &mut w.layers {
            for i in 0..l.a.nrows() {
                for j in 0..l.a.ncols() {
                    l.a[(i, j)] = it.next().unwrap();
                }
            }
            for x in l.b.iter_mut() {
                *x = it.next().unwrap();
            }
        }
        Ok(w)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.a.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }
}

/// `‖w‖_𝒲`.
pub fn weight_norm(w: &WeightVector) -> f64 {
    w.norm()
}

/// `w1 + a · w2`.
pub fn weight_axpy(a: f64, w1: &WeightVector, w2: &WeightVector) -> Result<WeightVector> {
    w1.axpy(a, w2)
}

/// Upper bound of the Lipschitz constant of `u ↦ r(w, u)`:
/// `∏_ℓ ‖A_ℓ‖_F · ‖ρ'‖_∞^{hidden_size}`.
///
/// The Frobenius norm over-estimates the operator norm, so the bound is not tight.
pub fn lipschitz_bound(w: &WeightVector, arch: &Architecture) -> f64 {
    let prod: f64 = w.layers.iter().map(|l| l.a.norm()).product();
    prod * arch.activation.sup_d1().powi(arch.hidden_size() as i32)
}

/// A weight vector bundled with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub weights: WeightVector,
}

impl Network {
    pub fn new(arch: Architecture, weights: WeightVector) -> Result<Self> {
        arch.check(&weights)?;
        Ok(Self { arch, weights })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let weights = WeightVector::zeros(&arch);
        Self { arch, weights }
    }

    pub fn with_weights(&self, weights: WeightVector) -> Result<Self> {
        Network::new(self.arch.clone(), weights)
    }

    pub fn forward(&self, u: &DVector<f64>) -> Result<(DVector<f64>, ForwardTape)> {
        forward(&self.weights, &self.arch, u)
    }

    /// Identity-activation network `u ↦ scale · u` with `n` inputs and outputs.
    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        let arch = Architecture::new(vec![n, n, n], Activation::Identity).expect("positive widths");
        let mut weights = WeightVector::zeros(&arch);
        weights.layers[0].a = DMatrix::identity(n, n) * scale;
        weights.layers[1].a = DMatrix::identity(n, n);
        Self { arch, weights }
    }
}
