//! Analytic first and second derivatives of a feedforward network.
//!
//! Every routine differentiates the layer recursion `r^{ℓ+1} = A_{ℓ+1} ρ(r^ℓ) + b_{ℓ+1}`
//! in forward mode, reusing the pre-activations stored in a [`ForwardTape`]. Layer
//! indices in the public API are 1-based (`1 ≤ ℓ ≤ L`).

use nalgebra::{DMatrix, DVector};

use super::{Activation, Architecture, Layer, WeightVector};
use crate::error::{Error, Result};

/// Pre-activations `r^ℓ(w, u)`, `ℓ = 1..L`, of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub activation: Activation,
    pub input: DVector<f64>,
    pub pre_activations: Vec<DVector<f64>>,
}

impl ForwardTape {
    /// `ρ(r^ℓ)` for `ℓ ≥ 1`; `ℓ = 0` is the input.
    fn post(&self, l: usize) -> DVector<f64> {
        if l == 0 {
            self.input.clone()
        } else {
            self.pre_activations[l - 1].map(|x| self.activation.value(x))
        }
    }

    fn d1(&self, l: usize) -> DVector<f64> {
        self.pre_activations[l - 1].map(|x| self.activation.d1(x))
    }

    fn d2(&self, l: usize) -> DVector<f64> {
        self.pre_activations[l - 1].map(|x| self.activation.d2(x))
    }

    pub fn output(&self) -> &DVector<f64> {
        self.pre_activations.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.pre_activations.len()
    }
}

fn check_tape(w: &WeightVector, tape: &ForwardTape) -> Result<()> {
    if w.layers.len() != tape.layers() {
        return Err(Error::Dimension {
            what: "tape layer count",
            expected: w.layers.len(),
            found: tape.layers(),
        });
    }
    Ok(())
}

fn check_layer_index(w: &WeightVector, l: usize) -> Result<()> {
    if l == 0 || l > w.layers.len() {
        return Err(Error::Dimension {
            what: "layer index (1-based)",
            expected: w.layers.len(),
            found: l,
        });
    }
    Ok(())
}

fn check_direction(w: &WeightVector, l: usize, dir: &Layer) -> Result<()> {
    let layer = &w.layers[l - 1];
    if dir.a.shape() != layer.a.shape() || dir.b.len() != layer.b.len() {
        return Err(Error::Dimension {
            what: "weight direction entries",
            expected: layer.a.len() + layer.b.len(),
            found: dir.a.len() + dir.b.len(),
        });
    }
    Ok(())
}

/// Evaluates `r(w, u)` and records the pre-activations.
pub fn forward(
    w: &WeightVector,
    arch: &Architecture,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, ForwardTape)> {
    arch.check(w)?;
    if u.len() != arch.n_in() {
        return Err(Error::Dimension {
            what: "network input",
            expected: arch.n_in(),
            found: u.len(),
        });
    }
    let act = arch.activation();
    let mut pre = Vec::with_capacity(w.layers.len());
    let mut z = u.clone();
    for (l, layer) in w.layers.iter().enumerate() {
        if l > 0 {
            z = z.map(|x| act.value(x));
        }
        z = layer.apply(&z);
        pre.push(z.clone());
    }
    let tape = ForwardTape {
        activation: act,
        input: u.clone(),
        pre_activations: pre,
    };
    Ok((z, tape))
}

/// `∂r^ℓ/∂u` for `ℓ = 1..L` (index `ℓ-1` in the returned vector).
fn partial_jacobians(w: &WeightVector, tape: &ForwardTape) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(w.layers.len());
    out.push(w.layers[0].a.clone());
    for l in 1..w.layers.len() {
        let mut scaled = out[l - 1].clone();
        let d = tape.d1(l);
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= d[i];
        }
        out.push(&w.layers[l].a * scaled);
    }
    out
}

/// `∂r/∂u = A_L D_{L-1} A_{L-1} ⋯ D_1 A_1` with `D_ℓ = diag ρ'(r^ℓ)`.
pub fn jacobian_u(w: &WeightVector, tape: &ForwardTape) -> Result<DMatrix<f64>> {
    check_tape(w, tape)?;
    Ok(partial_jacobians(w, tape).pop().unwrap())
}

/// Directional derivative `∂r/∂w_ℓ · w̃` for a direction `w̃ = (Ã, b̃)` in layer `ℓ`.
pub fn jacobian_w(
    w: &WeightVector,
    tape: &ForwardTape,
    layer: usize,
    dir: &Layer,
) -> Result<DVector<f64>> {
    check_tape(w, tape)?;
    check_layer_index(w, layer)?;
    check_direction(w, layer, dir)?;
    let mut delta = dir.apply(&tape.post(layer - 1));
    for k in layer..w.layers.len() {
        delta.component_mul_assign(&tape.d1(k));
        delta = &w.layers[k].a * delta;
    }
    Ok(delta)
}

/// Second derivative `∂²r/∂u²`, one `n_in × n_in` matrix per output component.
pub fn hessian_uu(w: &WeightVector, tape: &ForwardTape) -> Result<Vec<DMatrix<f64>>> {
    check_tape(w, tape)?;
    let n_in = tape.input.len();
    let jac = partial_jacobians(w, tape);
    let mut hess: Vec<DMatrix<f64>> = (0..w.layers[0].a.nrows())
        .map(|_| DMatrix::zeros(n_in, n_in))
        .collect();
    for l in 1..w.layers.len() {
        let d1 = tape.d1(l);
        let d2 = tape.d2(l);
        // T_m = ρ''_m J_m J_mᵀ + ρ'_m H_m, then H^{ℓ+1}_i = Σ_m A_im T_m
        let terms: Vec<DMatrix<f64>> = (0..hess.len())
            .map(|m| {
                let row = jac[l - 1].row(m).transpose();
                &row * row.transpose() * d2[m] + &hess[m] * d1[m]
            })
            .collect();
        let a = &w.layers[l].a;
        hess = (0..a.nrows())
            .map(|i| {
                let mut h = DMatrix::zeros(n_in, n_in);
                for (m, t) in terms.iter().enumerate() {
                    let c = a[(i, m)];
                    if c != 0.0 {
                        h += t * c;
                    }
                }
                h
            })
            .collect();
    }
    Ok(hess)
}

/// Mixed derivative `∂/∂w_s (∂r/∂u) · w̃`, an `n_out × n_in` matrix.
pub fn mixed_uw(
    w: &WeightVector,
    tape: &ForwardTape,
    layer: usize,
    dir: &Layer,
) -> Result<DMatrix<f64>> {
    check_tape(w, tape)?;
    check_layer_index(w, layer)?;
    check_direction(w, layer, dir)?;
    let jac = partial_jacobians(w, tape);
    // tangents of r^s and ∂r^s/∂u
    let mut delta = dir.apply(&tape.post(layer - 1));
    let mut jhat = if layer == 1 {
        dir.a.clone()
    } else {
        let mut scaled = jac[layer - 2].clone();
        let d = tape.d1(layer - 1);
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= d[i];
        }
        &dir.a * scaled
    };
    for k in layer..w.layers.len() {
        let d1 = tape.d1(k);
        let d2 = tape.d2(k);
        let mut inner = jhat;
        for (i, mut row) in inner.row_iter_mut().enumerate() {
            row *= d1[i];
        }
        let curvature = d2.component_mul(&delta);
        for (i, mut row) in inner.row_iter_mut().enumerate() {
            row += jac[k - 1].row(i) * curvature[i];
        }
        jhat = &w.layers[k].a * inner;
        delta.component_mul_assign(&d1);
        delta = &w.layers[k].a * delta;
    }
    Ok(jhat)
}
