//! Relaxed outer problem
//!
//! ```text
//! min_w  (1/2K) Σ_k ‖u_k − û_k‖² + (ν/2)‖w‖²   s.t.  G(u_k, w, ẑ_k) = 0
//! ```
//!
//! For each datum the inner problem is solved, the inner Hessian `G'_u` is assembled
//! from tangent solves, and the costate `μ_k` solves `G'_uᵀ μ_k = −(u_k − û_k)`. The
//! weight gradient is `νw + (1/K) Σ_k (∂G/∂w)ᵀ μ_k`. Weights are trained by
//! Barzilai–Borwein steps bootstrapped by one Armijo step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DataSet;
use crate::error::{Error, Result};
use crate::fem::{cell_gradient_products, mass_matrix, EllipticOperator};
use crate::inner::{
    nesterov_solve, InnerOptions, InnerProblem, InnerSolution, InnerStatus, Regularizer,
    RegularizerFile, MAX_HALVINGS,
};
use crate::mlp::{Layer, WeightVector};

/// Sign of the diagonal shift applied to a singular inner Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShiftSign {
    #[default]
    Plus,
    Minus,
}

/// Norm on the control space used by the outer objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlNorm {
    /// Plain Euclidean norm of the control values.
    #[default]
    Euclidean,
    /// `Σ_j |ω_j| v_j²`, weighting each group by its measure.
    CellWeighted,
}

/// BB step used when `⟨s, Δg⟩ ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureFallback {
    /// `|⟨s, s⟩ / ⟨s, Δg⟩|` when the denominator is negative, previous step when zero.
    #[default]
    Absolute,
    /// Always reuse the previous step.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterConfig {
    /// Weight penalty `ν`.
    pub nu: f64,
    /// Requested shift `ε` for singular Hessians.
    pub epsilon: f64,
    pub epsilon_sign: ShiftSign,
    /// Stopping tolerance on `‖𝐆(w)‖_𝒲`.
    pub tol: f64,
    pub max_steps: usize,
    /// Armijo factor of the bootstrap step.
    pub beta: f64,
    pub inner: InnerOptions,
    pub control_norm: ControlNorm,
    /// Safeguard interval of the BB step length.
    pub min_step: f64,
    pub max_step: f64,
    pub curvature_fallback: CurvatureFallback,
    /// Window of the nonmonotone step acceptance; 0 takes every BB step unchecked.
    pub nonmonotone_window: usize,
    /// Worker threads for the per-datum pipelines; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Seed of the initial weights.
    pub seed: u64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            nu: 0.0,
            epsilon: 1e-8,
            epsilon_sign: ShiftSign::Plus,
            tol: 1e-8,
            max_steps: 100,
            beta: 0.5,
            inner: InnerOptions::default(),
            control_norm: ControlNorm::Euclidean,
            min_step: 1e-8,
            max_step: 1e3,
            curvature_fallback: CurvatureFallback::Absolute,
            nonmonotone_window: 10,
            workers: None,
            seed: 0,
        }
    }
}

impl OuterConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if !(self.nu >= 0.0) {
            return Err(Error::Config(format!(
                "nu must be nonnegative, got {}",
                self.nu
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        if !(self.min_step > 0.0 && self.max_step >= self.min_step) {
            return Err(Error::Config("invalid BB step safeguards".into()));
        }
        if !(self.inner.alpha > 0.0 && self.inner.alpha < 1.0 && self.inner.tol > 0.0) {
            return Err(Error::Config("invalid inner solver options".into()));
        }
        Ok(())
    }
}

/// Inner Hessian `G'_u(u, w, ẑ)` before symmetrization.
///
/// `H = S'ᵀ M S' + T + ∇²_u γ(r(w, u))`, where column `j` of `S'` is the tangent state
/// for the `j`-th control direction and `T_ij = ∫_{ω_i} ỹ_j'p' + ∫_{ω_j} ỹ_i'p'` is the
/// adjoint form of the second-order state term.
pub fn assemble_hessian_raw(
    prob: &InnerProblem<'_>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let space = prob.space;
    let mesh = space.mesh();
    let n = space.groups();
    let op = EllipticOperator::new(space, u)?;
    let tangents = (0..n)
        .map(|j| {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            op.linearized(y, &e)
        })
        .collect::<Result<Vec<_>>>()?;
    let mass = mass_matrix(mesh);
    let mass_tangents: Vec<Vec<f64>> = tangents
        .iter()
        .map(|t| mass.mul_vec(t.as_slice()))
        .collect();
    // C_ij = ∫_{ω_i} ỹ_j' p'
    let cross: Vec<DVector<f64>> = tangents
        .iter()
        .map(|t| space.gather(&cell_gradient_products(mesh, t, p)))
        .collect();
    let (_, _, tape) = prob.reg.value_and_gradient(u)?;
    let mut h = prob.reg.hessian(&tape)?;
    for i in 0..n {
        for j in 0..n {
            let gauss_newton: f64 = tangents[i]
                .iter()
                .zip(&mass_tangents[j])
                .map(|(a, b)| a * b)
                .sum();
            h[(i, j)] += gauss_newton + cross[j][i] + cross[i][j];
        }
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(
            "inner Hessian has non-finite entries".into(),
        ));
    }
    Ok(h)
}

/// Symmetrized inner Hessian `(H + Hᵀ)/2`.
pub fn assemble_hessian(
    prob: &InnerProblem<'_>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let h = assemble_hessian_raw(prob, u, y, p)?;
    Ok((&h + h.transpose()) * 0.5)
}

/// Relative pivot threshold below which a matrix counts as singular.
const PIVOT_TOL: f64 = 1e-12;
const MAX_DOUBLINGS: u32 = 2000;

/// Whether the partially pivoted LU of `h` has all pivots above `1e-12 ‖h‖`.
pub fn factorizes(h: &DMatrix<f64>) -> bool {
    if h.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let threshold = PIVOT_TOL * h.norm();
    let lu = h.clone().lu();
    let u = lu.u();
    (0..h.nrows()).all(|i| u[(i, i)].abs() > threshold)
}

/// Returns `(H, 0)` when `H` factorizes, otherwise `(H ± εI, ε)` with the smallest
/// `ε ∈ {ε_request · 2^j}` that factorizes.
///
/// A nonpositive request falls back to `√ε_mach · max(‖H‖, 1)`.
pub fn epsilon_shift(h: &DMatrix<f64>, eps_request: f64, sign: ShiftSign) -> (DMatrix<f64>, f64) {
    if factorizes(h) {
        return (h.clone(), 0.0);
    }
    let n = h.nrows();
    let mut eps = if eps_request > 0.0 && eps_request.is_finite() {
        eps_request
    } else {
        f64::EPSILON.sqrt() * h.norm().max(1.0)
    };
    let s = match sign {
        ShiftSign::Plus => 1.0,
        ShiftSign::Minus => -1.0,
    };
    for _ in 0..MAX_DOUBLINGS {
        let shifted = h + DMatrix::identity(n, n) * (s * eps);
        if factorizes(&shifted) {
            return (shifted, eps);
        }
        eps *= 2.0;
    }
    unreachable!("a dominant diagonal shift always factorizes")
}

/// Solves `Hᵀ μ = rhs` by LU with iterative refinement and returns `μ` and the
/// relative residual.
fn solve_transposed(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let ht = h.transpose();
    let lu = ht.clone().lu();
    let mut mu = lu
        .solve(rhs)
        .ok_or_else(|| Error::Numerical("costate matrix is singular".into()))?;
    let scale = rhs.norm();
    let residual = |mu: &DVector<f64>| (&ht * mu - rhs).norm();
    let mut res = residual(&mu);
    for _ in 0..2 {
        if res <= 1e-14 * scale {
            break;
        }
        let r = rhs - &ht * &mu;
        if let Some(d) = lu.solve(&r) {
            let candidate = &mu + d;
            let cres = residual(&candidate);
            if cres < res {
                mu = candidate;
                res = cres;
            }
        }
    }
    if mu.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("costate is not finite".into()));
    }
    let rel = if scale > 0.0 { res / scale } else { res };
    Ok((mu, rel))
}

/// Relative residual above which a costate solve is reported as a numerical failure.
pub const COSTATE_TOL: f64 = 1e-10;

/// Costate `μ` solving `Hᵀ μ = −(u − û)`.
pub fn solve_costate(
    h_shifted: &DMatrix<f64>,
    u: &DVector<f64>,
    u_hat: &DVector<f64>,
) -> Result<DVector<f64>> {
    let rhs = -(u - u_hat);
    if rhs.iter().all(|&x| x == 0.0) {
        return Ok(DVector::zeros(rhs.len()));
    }
    let (mu, rel) = solve_transposed(h_shifted, &rhs)?;
    if rel > COSTATE_TOL {
        return Err(Error::Numerical(format!(
            "costate residual {rel:e} exceeds {COSTATE_TOL:e}"
        )));
    }
    Ok(mu)
}

/// `100 · sqrt(Σ_k ‖u_k − û_k‖² / Σ_k ‖û_k‖²)`.
pub fn relative_misfit(u: &[DVector<f64>], u_hat: &[DVector<f64>]) -> Result<f64> {
    if u.len() != u_hat.len() {
        return Err(Error::Dimension {
            what: "misfit control lists",
            expected: u_hat.len(),
            found: u.len(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in u.iter().zip(u_hat) {
        if a.len() != b.len() {
            return Err(Error::Dimension {
                what: "misfit control",
                expected: b.len(),
                found: a.len(),
            });
        }
        num += (a - b).norm_squared();
        den += b.norm_squared();
    }
    if den == 0.0 {
        return Err(Error::Numerical(
            "relative misfit undefined for all-zero reference controls".into(),
        ));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// Per-datum result of the costate pipeline.
#[derive(Debug, Clone)]
pub struct DatumGradient {
    pub inner: InnerSolution,
    pub mu: DVector<f64>,
    pub epsilon_used: f64,
    pub costate_residual: f64,
    /// Controls strictly inside the box; active ones are frozen in the costate solve.
    pub free: Vec<bool>,
    pub contribution: WeightVector,
}

/// Outer objective, misfit and weight gradient at one `w`.
#[derive(Debug, Clone)]
pub struct OuterEvaluation {
    pub objective: f64,
    pub misfit_percent: f64,
    pub gradient: WeightVector,
    pub data: Vec<DatumGradient>,
}

impl OuterEvaluation {
    pub fn inner_solutions(&self) -> Vec<&InnerSolution> {
        self.data.iter().map(|d| &d.inner).collect()
    }
}

/// The relaxed outer problem for one data set and one architecture.
#[derive(Debug)]
pub struct OuterProblem<'a> {
    pub dataset: &'a DataSet,
    pub template: &'a Regularizer,
    pub config: OuterConfig,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> OuterProblem<'a> {
    /// `template` fixes the architecture and `γ`; its weights are replaced at each
    /// evaluation.
    pub fn new(
        dataset: &'a DataSet,
        template: &'a Regularizer,
        config: OuterConfig,
    ) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        if template.n_in() != dataset.space.groups() {
            return Err(Error::Dimension {
                what: "network input vs control groups",
                expected: dataset.space.groups(),
                found: template.n_in(),
            });
        }
        let pool = match config.workers {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?,
            ),
            None => None,
        };
        Ok(Self {
            dataset,
            template,
            config,
            pool,
        })
    }

    fn regularizer(&self, w: &WeightVector) -> Result<Regularizer> {
        Ok(Regularizer {
            net: self.template.net.with_weights(w.clone())?,
            ..self.template.clone()
        })
    }

    /// Maps `f(k, items[k])` over the data in parallel, returning results in order.
    fn per_datum<T, U, F>(&self, items: Vec<T>, f: F) -> Result<Vec<U>>
    where
        T: Send,
        U: Send,
        F: Fn(usize, T) -> Result<U> + Sync + Send,
    {
        let run = || {
            items
                .into_par_iter()
                .enumerate()
                .map(|(k, item)| f(k, item))
                .collect()
        };
        match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        }
    }

    /// `|ω_j|` weights of the control norm.
    fn norm_weights(&self) -> DVector<f64> {
        match self.config.control_norm {
            ControlNorm::Euclidean => DVector::from_element(self.dataset.space.groups(), 1.0),
            ControlNorm::CellWeighted => self.dataset.space.group_measures(),
        }
    }

    fn solve_inner(&self, reg: &Regularizer, k: usize) -> Result<InnerSolution> {
        let ds = self.dataset;
        let prob = InnerProblem::new(&ds.space, &ds.data, &ds.pairs[k].z_hat, reg)?;
        nesterov_solve(&prob, &ds.mean_control(), &self.config.inner)
    }

    fn assemble(&self, w: &WeightVector, controls: &[&DVector<f64>]) -> Result<(f64, f64)> {
        let weights = self.norm_weights();
        let k = self.dataset.len() as f64;
        let mut fit = 0.0;
        for (u, pair) in controls.iter().zip(&self.dataset.pairs) {
            let d = *u - &pair.u_hat;
            fit += d.component_mul(&d).dot(&weights);
        }
        let objective = fit / (2.0 * k) + 0.5 * self.config.nu * w.norm().powi(2);
        let u_hat: Vec<DVector<f64>> = self.dataset.pairs.iter().map(|p| p.u_hat.clone()).collect();
        let u: Vec<DVector<f64>> = controls.iter().map(|u| (*u).clone()).collect();
        Ok((objective, relative_misfit(&u, &u_hat)?))
    }

    /// Outer objective and the inner solutions behind it.
    pub fn objective(&self, w: &WeightVector) -> Result<(f64, f64, Vec<InnerSolution>)> {
        let reg = self.regularizer(w)?;
        let sols = self.per_datum(vec![(); self.dataset.len()], |k, ()| {
            self.solve_inner(&reg, k)
        })?;
        let controls: Vec<&DVector<f64>> = sols.iter().map(|s| &s.u).collect();
        let (objective, misfit) = self.assemble(w, &controls)?;
        Ok((objective, misfit, sols))
    }

    fn datum_gradient(
        &self,
        reg: &Regularizer,
        k: usize,
        inner: InnerSolution,
    ) -> Result<DatumGradient> {
        let ds = self.dataset;
        let pair = &ds.pairs[k];
        let prob = InnerProblem::new(&ds.space, &ds.data, &pair.z_hat, reg)?;
        let n = ds.space.groups();
        let bounds = ds.space.bounds();
        let free: Vec<bool> = inner
            .u
            .iter()
            .map(|&x| x > bounds.lower && x < bounds.upper)
            .collect();
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();

        let mut mu = DVector::zeros(n);
        let mut epsilon_used = 0.0;
        let mut costate_residual = 0.0;
        let rhs_full = -(&inner.u - &pair.u_hat).component_mul(&self.norm_weights());
        if !idx.is_empty() && rhs_full.iter().any(|&x| x != 0.0) {
            let h = assemble_hessian(&prob, &inner.u, &inner.y, &inner.p)?;
            let h_free = DMatrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])]);
            let rhs = DVector::from_fn(idx.len(), |a, _| rhs_full[idx[a]]);
            let (shifted, eps) =
                epsilon_shift(&h_free, self.config.epsilon, self.config.epsilon_sign);
            epsilon_used = eps;
            if rhs.iter().any(|&x| x != 0.0) {
                let (mu_free, rel) = solve_transposed(&shifted, &rhs)?;
                costate_residual = rel;
                if rel > COSTATE_TOL {
                    return Err(Error::Numerical(format!(
                        "costate residual {rel:e} exceeds {COSTATE_TOL:e} for datum {k}"
                    )));
                }
                for (a, &i) in idx.iter().enumerate() {
                    mu[i] = mu_free[a];
                }
            }
        }
        let contribution = self.weight_adjoint(reg, &inner.u, &mu)?;
        Ok(DatumGradient {
            inner,
            mu,
            epsilon_used,
            costate_residual,
            free,
            contribution,
        })
    }

    /// `(∂G/∂w)ᵀ μ`, assembled entry by entry over unit weight directions.
    fn weight_adjoint(
        &self,
        reg: &Regularizer,
        u: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> Result<WeightVector> {
        let w = &reg.net.weights;
        let mut out = WeightVector::zeros(&reg.net.arch);
        if mu.iter().all(|&x| x == 0.0) {
            return Ok(out);
        }
        let (_, _, tape) = reg.value_and_gradient(u)?;
        for (l, layer) in w.layers.iter().enumerate() {
            let (rows, cols) = layer.a.shape();
            let mut dir = Layer::zeros(cols, rows);
            for i in 0..rows {
                for j in 0..cols {
                    dir.a[(i, j)] = 1.0;
                    out.layers[l].a[(i, j)] =
                        mu.dot(&reg.gradient_sensitivity(&tape, l + 1, &dir)?);
                    dir.a[(i, j)] = 0.0;
                }
                dir.b[i] = 1.0;
                out.layers[l].b[i] = mu.dot(&reg.gradient_sensitivity(&tape, l + 1, &dir)?);
                dir.b[i] = 0.0;
            }
        }
        Ok(out)
    }

    /// Objective, misfit and `𝐆(w) = νw + (1/K) Σ_k (∂G/∂w)ᵀ μ_k`.
    pub fn evaluate(&self, w: &WeightVector) -> Result<OuterEvaluation> {
        let (_, _, sols) = self.objective(w)?;
        self.evaluate_with(w, sols)
    }

    /// [`OuterProblem::evaluate`] reusing inner solutions already computed at `w`.
    pub fn evaluate_with(
        &self,
        w: &WeightVector,
        solutions: Vec<InnerSolution>,
    ) -> Result<OuterEvaluation> {
        if solutions.len() != self.dataset.len() {
            return Err(Error::Dimension {
                what: "inner solutions",
                expected: self.dataset.len(),
                found: solutions.len(),
            });
        }
        let reg = self.regularizer(w)?;
        let data = self.per_datum(solutions, |k, inner| self.datum_gradient(&reg, k, inner))?;
        let k = self.dataset.len() as f64;
        // deterministic reduction in data-set order
        let mut gradient = w.scaled(self.config.nu);
        for d in &data {
            gradient = gradient.axpy(1.0 / k, &d.contribution)?;
        }
        let controls: Vec<&DVector<f64>> = data.iter().map(|d| &d.inner.u).collect();
        let (objective, misfit_percent) = self.assemble(w, &controls)?;
        Ok(OuterEvaluation {
            objective,
            misfit_percent,
            gradient,
            data,
        })
    }
}

/// `(1/2K) Σ_k ‖u_k − û_k‖² + (ν/2)‖w‖²` with `u_k` the inner solutions at `w`.
pub fn outer_objective(dataset: &DataSet, reg: &Regularizer, config: &OuterConfig) -> Result<f64> {
    let prob = OuterProblem::new(dataset, reg, *config)?;
    Ok(prob.objective(&reg.net.weights)?.0)
}

/// Weight gradient `𝐆(w)` at the weights of `reg`.
pub fn outer_gradient(
    dataset: &DataSet,
    reg: &Regularizer,
    config: &OuterConfig,
) -> Result<OuterEvaluation> {
    let prob = OuterProblem::new(dataset, reg, *config)?;
    prob.evaluate(&reg.net.weights)
}

/// A smooth objective over weight vectors, as seen by [`barzilai_borwein`].
///
/// `value` returns whatever intermediate state the gradient can reuse at the same `w`.
pub trait WeightObjective {
    type State;
    type Extra;
    fn value(&self, w: &WeightVector) -> Result<(f64, Self::State)>;
    fn gradient(&self, w: &WeightVector, state: Self::State)
        -> Result<(WeightVector, Self::Extra)>;
}

impl WeightObjective for OuterProblem<'_> {
    type State = Vec<InnerSolution>;
    type Extra = OuterEvaluation;

    fn value(&self, w: &WeightVector) -> Result<(f64, Vec<InnerSolution>)> {
        let (objective, _, sols) = self.objective(w)?;
        Ok((objective, sols))
    }

    fn gradient(
        &self,
        w: &WeightVector,
        state: Vec<InnerSolution>,
    ) -> Result<(WeightVector, OuterEvaluation)> {
        let ev = self.evaluate_with(w, state)?;
        Ok((ev.gradient.clone(), ev))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BbOptions {
    pub tol: f64,
    pub max_steps: usize,
    pub beta: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub curvature_fallback: CurvatureFallback,
    /// Objectives remembered by the nonmonotone safeguard; 0 accepts every BB step.
    pub nonmonotone_window: usize,
}

impl From<&OuterConfig> for BbOptions {
    fn from(c: &OuterConfig) -> Self {
        Self {
            tol: c.tol,
            max_steps: c.max_steps,
            beta: c.beta,
            min_step: c.min_step,
            max_step: c.max_step,
            curvature_fallback: c.curvature_fallback,
            nonmonotone_window: c.nonmonotone_window,
        }
    }
}

/// One iterate of the BB loop.
#[derive(Debug, Clone)]
pub struct BbIterate<E> {
    pub weights: WeightVector,
    pub objective: f64,
    pub gradient_norm: f64,
    /// Step length that produced this iterate (0 for the initial point).
    pub step: f64,
    pub extra: E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxSteps,
    /// The nonmonotone safeguard found no acceptable step.
    Stagnated,
}

/// Sufficient-decrease constant of the nonmonotone safeguard.
const SUFFICIENT_DECREASE: f64 = 1e-4;

/// Numerical failures at a trial point count as rejection; other errors abort.
fn soft<T>(e: Error) -> Result<Option<T>> {
    match e {
        Error::Numerical(_) | Error::Stagnation { .. } => Ok(None),
        e => Err(e),
    }
}

/// Barzilai–Borwein (BB1) descent: one Armijo step, then
/// `η_n = ⟨s, s⟩ / ⟨s, Δg⟩` clamped to `[min_step, max_step]`, with
/// [`CurvatureFallback`] deciding the step when `⟨s, Δg⟩ ≤ 0`. With a nonzero
/// `nonmonotone_window` a step is backtracked until
/// `J(w − ηG) ≤ max(last window objectives) − 1e-4 η‖G‖²`. `visit` observes every
/// iterate as it is produced.
pub fn barzilai_borwein<P, F>(
    problem: &P,
    w0: &WeightVector,
    opts: &BbOptions,
    mut visit: F,
) -> Result<(Vec<BbIterate<P::Extra>>, StopReason)>
where
    P: WeightObjective,
    F: FnMut(&BbIterate<P::Extra>),
{
    let mut trace: Vec<BbIterate<P::Extra>> = Vec::new();
    let mut w = w0.clone();
    let (mut obj, state) = problem.value(&w)?;
    let (mut g, extra) = problem.gradient(&w, state)?;
    let mut pending = Some(extra);
    let mut w_prev = w.clone();
    let mut g_prev = g.clone();
    let mut step = 1.0;
    let mut step_taken = 0.0;

    loop {
        let it = BbIterate {
            weights: w.clone(),
            objective: obj,
            gradient_norm: g.norm(),
            step: step_taken,
            extra: pending.take().expect("evaluation of the current iterate"),
        };
        visit(&it);
        let done = it.gradient_norm <= opts.tol;
        trace.push(it);
        if done {
            return Ok((trace, StopReason::Converged));
        }
        if trace.len() > opts.max_steps {
            return Ok((trace, StopReason::MaxSteps));
        }

        let bootstrap = trace.len() == 1;
        let reference = if bootstrap || opts.nonmonotone_window == 0 {
            obj
        } else {
            trace
                .iter()
                .rev()
                .take(opts.nonmonotone_window)
                .map(|it| it.objective)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        if !bootstrap {
            let s = w.axpy(-1.0, &w_prev)?;
            let dg = g.axpy(-1.0, &g_prev)?;
            let denom = s.dot(&dg)?;
            let absolute = opts.curvature_fallback == CurvatureFallback::Absolute;
            if denom > 0.0 || (absolute && denom < 0.0) {
                step = (s.dot(&s)? / denom)
                    .abs()
                    .clamp(opts.min_step, opts.max_step);
            }
        }
        let g_sq = g.dot(&g)?;

        // the first step is Armijo (strict decrease from η = 1); later steps are BB,
        // backtracked only by the nonmonotone safeguard
        let mut eta = step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = w.axpy(-eta, &g)?;
            if !candidate.is_finite() {
                return Err(Error::Numerical("outer iterate is not finite".into()));
            }
            let trial = problem.value(&candidate).map(Some).or_else(soft)?;
            let unchecked = !bootstrap && opts.nonmonotone_window == 0;
            if let Some((value, state)) = trial {
                let ok = if bootstrap {
                    value < obj
                } else {
                    value <= reference - SUFFICIENT_DECREASE * eta * g_sq
                };
                if ok || unchecked {
                    if let Some(grad) = problem
                        .gradient(&candidate, state)
                        .map(Some)
                        .or_else(soft)?
                    {
                        accepted = Some((candidate, value, grad));
                        break;
                    }
                }
            } else if unchecked {
                return Err(Error::Numerical("objective failed at a BB iterate".into()));
            }
            eta *= opts.beta;
        }
        let Some((candidate, value, (cg, cextra))) = accepted else {
            if bootstrap {
                return Err(Error::Stagnation {
                    stage: "outer Armijo bootstrap (re-seed the initial weights)",
                    halvings: MAX_HALVINGS,
                });
            }
            return Ok((trace, StopReason::Stagnated));
        };
        if bootstrap {
            step = eta;
        }
        step_taken = eta;
        w_prev = std::mem::replace(&mut w, candidate);
        g_prev = std::mem::replace(&mut g, cg);
        obj = value;
        pending = Some(cextra);
    }
}

/// Per-step training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub misfit_percent: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub objective: Vec<f64>,
    pub step_size: Vec<f64>,
    /// Total inner gradient steps over all data, per outer step.
    pub inner_iterations: Vec<usize>,
    /// Inner solves that stopped before reaching the tolerance, per outer step.
    pub inner_unconverged: Vec<usize>,
    /// Inner solutions touching the control box, per outer step.
    pub boundary_active: Vec<usize>,
    /// Largest ε-shift applied, per outer step.
    pub epsilon_used: Vec<f64>,
    pub stop_reason: StopReason,
    pub final_weights: RegularizerFile,
    pub wall_time_seconds: f64,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.misfit_percent.len()
    }

    pub fn min_misfit(&self) -> f64 {
        self.misfit_percent
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// `step,misfit_percent` lines with a header, step 0 being the initial weights.
    pub fn misfit_csv(&self) -> String {
        let mut out = String::from("step,misfit_percent\n");
        for (i, m) in self.misfit_percent.iter().enumerate() {
            out.push_str(&format!("{i},{m}\n"));
        }
        out
    }
}

/// Trains the weights of `init` on `dataset` and records the misfit history.
pub fn bb_solve(
    dataset: &DataSet,
    init: &Regularizer,
    config: &OuterConfig,
) -> Result<TrainReport> {
    bb_solve_with(dataset, init, config, |_, _| {})
}

/// [`bb_solve`] with a progress callback `(step, evaluation)`.
pub fn bb_solve_with<F>(
    dataset: &DataSet,
    init: &Regularizer,
    config: &OuterConfig,
    mut progress: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, &BbIterate<OuterEvaluation>),
{
    let start = Instant::now();
    let problem = OuterProblem::new(dataset, init, *config)?;
    if !init.net.weights.is_finite() {
        return Err(Error::Config("initial weights must be finite".into()));
    }
    let mut step_index = 0;
    let (trace, stop_reason) = barzilai_borwein(
        &problem,
        &init.net.weights,
        &BbOptions::from(config),
        |it| {
            progress(step_index, it);
            step_index += 1;
        },
    )?;
    let last = trace.last().unwrap();
    let final_reg = Regularizer {
        net: init.net.with_weights(last.weights.clone())?,
        ..init.clone()
    };
    let count = |f: &dyn Fn(&DatumGradient) -> bool| -> Vec<usize> {
        trace
            .iter()
            .map(|it| it.extra.data.iter().filter(|d| f(d)).count())
            .collect()
    };
    Ok(TrainReport {
        misfit_percent: trace.iter().map(|it| it.extra.misfit_percent).collect(),
        grad_norm: trace.iter().map(|it| it.gradient_norm).collect(),
        objective: trace.iter().map(|it| it.objective).collect(),
        step_size: trace.iter().map(|it| it.step).collect(),
        inner_iterations: trace
            .iter()
            .map(|it| it.extra.data.iter().map(|d| d.inner.iterations).sum())
            .collect(),
        inner_unconverged: count(&|d| d.inner.status != InnerStatus::Converged),
        boundary_active: count(&|d| d.inner.on_boundary),
        epsilon_used: trace
            .iter()
            .map(|it| {
                it.extra
                    .data
                    .iter()
                    .map(|d| d.epsilon_used)
                    .fold(0.0, f64::max)
            })
            .collect(),
        stop_reason,
        final_weights: RegularizerFile::from(&final_reg),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}
