//! Inner optimal-control problem
//!
//! ```text
//! min_u  ½‖𝕊(u) − ẑ‖²_{L²} + γ(r(w, u)),     u ∈ [m, M]^{n_in}
//! ```
//!
//! The reduced gradient is evaluated with one state and one adjoint solve, and the
//! problem is minimized by projected Nesterov iterations bootstrapped by an Armijo
//! backtracking step.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    cell_gradient_products, l2_inner, project_box, Bounds, ControlSpace, EllipticOperator,
    ProblemData,
};
use crate::mlp::{self, ForwardTape, Layer, Network, WeightFile};

/// Outer map `γ: R^{n_out} → R` applied to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    /// `γ(v) = v`, requires `n_out = 1`.
    #[default]
    Identity,
    /// `γ(v) = ½|v|²`.
    HalfSquaredNorm,
}

impl Gamma {
    pub fn value(self, r: &DVector<f64>) -> f64 {
        match self {
            Gamma::Identity => r[0],
            Gamma::HalfSquaredNorm => 0.5 * r.norm_squared(),
        }
    }

    pub fn gradient(self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Gamma::Identity => DVector::from_element(1, 1.0),
            Gamma::HalfSquaredNorm => r.clone(),
        }
    }

    /// `None` stands for the zero matrix.
    pub fn hessian(self, r: &DVector<f64>) -> Option<DMatrix<f64>> {
        match self {
            Gamma::Identity => None,
            Gamma::HalfSquaredNorm => Some(DMatrix::identity(r.len(), r.len())),
        }
    }
}

/// The regularizer `u ↦ γ(r(w, u))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub net: Network,
    pub gamma: Gamma,
    /// Fixed point `c` subtracted from the control before it enters the network,
    /// so the regularizer is `u ↦ γ(r(w, u − c))`.
    pub center: Option<DVector<f64>>,
}

impl Regularizer {
    pub fn new(net: Network, gamma: Gamma) -> Result<Self> {
        if gamma == Gamma::Identity && net.arch.n_out() != 1 {
            return Err(Error::Architecture(format!(
                "identity γ needs a scalar network output, got n_out = {}",
                net.arch.n_out()
            )));
        }
        Ok(Self {
            net,
            gamma,
            center: None,
        })
    }

    pub fn with_center(mut self, center: DVector<f64>) -> Result<Self> {
        if center.len() != self.n_in() {
            return Err(Error::Dimension {
                what: "regularizer center",
                expected: self.n_in(),
                found: center.len(),
            });
        }
        self.center = Some(center);
        Ok(self)
    }

    fn input(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.center {
            Some(c) if c.len() == u.len() => u - c,
            _ => u.clone(),
        }
    }

    /// `u ↦ c‖u‖²` realized as `½|√(2c) u|²` by an identity-activation network.
    pub fn quadratic(n_in: usize, c: f64) -> Self {
        Self {
            net: Network::scaled_identity(n_in, (2.0 * c).sqrt()),
            gamma: Gamma::HalfSquaredNorm,
            center: None,
        }
    }

    pub fn n_in(&self) -> usize {
        self.net.arch.n_in()
    }

    pub fn value(&self, u: &DVector<f64>) -> Result<f64> {
        let (r, _) = self.net.forward(&self.input(u))?;
        Ok(self.gamma.value(&r))
    }

    /// Value, `∇_u γ(r(w, u)) = r'_uᵀ γ'(r)` and the tape.
    pub fn value_and_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>, ForwardTape)> {
        let (r, tape) = self.net.forward(&self.input(u))?;
        let jac = mlp::jacobian_u(&self.net.weights, &tape)?;
        let grad = jac.transpose() * self.gamma.gradient(&r);
        Ok((self.gamma.value(&r), grad, tape))
    }

    /// `∇²_u γ(r(w, u)) = Σ_i γ'_i r''_{i,uu} + r'_uᵀ γ'' r'_u`.
    pub fn hessian(&self, tape: &ForwardTape) -> Result<DMatrix<f64>> {
        let w = &self.net.weights;
        let r = tape.output();
        let g1 = self.gamma.gradient(r);
        let n = tape.input.len();
        let mut h = DMatrix::zeros(n, n);
        for (i, hi) in mlp::hessian_uu(w, tape)?.iter().enumerate() {
            h += hi * g1[i];
        }
        if let Some(g2) = self.gamma.hessian(r) {
            let jac = mlp::jacobian_u(w, tape)?;
            h += jac.transpose() * g2 * jac;
        }
        Ok(h)
    }

    /// `∂/∂w_ℓ (r'_uᵀ γ'(r)) · w̃`, the sensitivity of the regularizer gradient to a
    /// weight direction in layer `ℓ` (1-based).
    pub fn gradient_sensitivity(
        &self,
        tape: &ForwardTape,
        layer: usize,
        dir: &Layer,
    ) -> Result<DVector<f64>> {
        let w = &self.net.weights;
        let r = tape.output();
        let mixed = mlp::mixed_uw(w, tape, layer, dir)?;
        let mut out = mixed.transpose() * self.gamma.gradient(r);
        if let Some(g2) = self.gamma.hessian(r) {
            let jac = mlp::jacobian_u(w, tape)?;
            let dr = mlp::jacobian_w(w, tape, layer, dir)?;
            out += jac.transpose() * (g2 * dr);
        }
        Ok(out)
    }
}

/// Checkpoint of a [`Regularizer`]: the weight file fields plus `gamma` and an optional
/// `center`. Plain weight files load with `γ = identity` and no center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerFile {
    #[serde(flatten)]
    pub network: WeightFile,
    #[serde(default)]
    pub gamma: Gamma,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
}

impl From<&Regularizer> for RegularizerFile {
    fn from(reg: &Regularizer) -> Self {
        Self {
            network: WeightFile::from(&reg.net),
            gamma: reg.gamma,
            center: reg.center.as_ref().map(|c| c.iter().copied().collect()),
        }
    }
}

impl TryFrom<RegularizerFile> for Regularizer {
    type Error = Error;

    fn try_from(file: RegularizerFile) -> Result<Self> {
        let reg = Regularizer::new(Network::try_from(file.network)?, file.gamma)?;
        match file.center {
            Some(c) => reg.with_center(DVector::from_vec(c)),
            None => Ok(reg),
        }
    }
}

impl Regularizer {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&RegularizerFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Regularizer::try_from(serde_json::from_str::<RegularizerFile>(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Regularizer::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One inner problem: PDE data, target state `ẑ` and regularizer.
#[derive(Debug, Clone, Copy)]
pub struct InnerProblem<'a> {
    pub space: &'a ControlSpace,
    pub data: &'a ProblemData,
    pub z_hat: &'a DVector<f64>,
    pub reg: &'a Regularizer,
}

/// State, adjoint, objective and gradient at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub p: DVector<f64>,
    pub objective: f64,
    pub gradient: DVector<f64>,
}

impl<'a> InnerProblem<'a> {
    pub fn new(
        space: &'a ControlSpace,
        data: &'a ProblemData,
        z_hat: &'a DVector<f64>,
        reg: &'a Regularizer,
    ) -> Result<Self> {
        if reg.n_in() != space.groups() {
            return Err(Error::Dimension {
                what: "network input vs control groups",
                expected: space.groups(),
                found: reg.n_in(),
            });
        }
        data.check(space.mesh())?;
        if z_hat.len() != space.mesh().nodes() {
            return Err(Error::Dimension {
                what: "target state",
                expected: space.mesh().nodes(),
                found: z_hat.len(),
            });
        }
        Ok(Self {
            space,
            data,
            z_hat,
            reg,
        })
    }

    pub fn bounds(&self) -> Bounds {
        self.space.bounds()
    }

    fn misfit(&self, y: &DVector<f64>) -> Result<f64> {
        let r = y - self.z_hat;
        Ok(0.5 * l2_inner(self.space.mesh(), &r, &r)?)
    }

    /// `½‖𝕊(u) − ẑ‖² + γ(r(w, u))`.
    pub fn objective(&self, u: &DVector<f64>) -> Result<f64> {
        let y = EllipticOperator::new(self.space, u)?.state(self.data)?;
        Ok(self.misfit(&y)? + self.reg.value(u)?)
    }

    /// Objective and gradient `G(u, w, ẑ)` through the state and adjoint solves.
    pub fn evaluate(&self, u: &DVector<f64>) -> Result<Evaluation> {
        let op = EllipticOperator::new(self.space, u)?;
        let y = op.state(self.data)?;
        let p = op.adjoint(&y, self.z_hat)?;
        let (reg_value, reg_grad, _) = self.reg.value_and_gradient(u)?;
        let pde = self
            .space
            .gather(&cell_gradient_products(self.space.mesh(), &y, &p));
        let objective = self.misfit(&y)? + reg_value;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "inner objective is not finite ({objective})"
            )));
        }
        Ok(Evaluation {
            u: u.clone(),
            y,
            p,
            objective,
            gradient: reg_grad + pde,
        })
    }

    pub fn gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(u)?.gradient)
    }
}

/// Gradient with the components pushing against an active bound zeroed.
pub fn projected_gradient(u: &DVector<f64>, g: &DVector<f64>, bounds: Bounds) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| {
        let at_lower = u[i] <= bounds.lower && g[i] > 0.0;
        let at_upper = u[i] >= bounds.upper && g[i] < 0.0;
        if at_lower || at_upper {
            0.0
        } else {
            g[i]
        }
    })
}

/// Whether any control sits on a bound.
pub fn touches_bounds(u: &DVector<f64>, bounds: Bounds) -> bool {
    u.iter().any(|&x| x <= bounds.lower || x >= bounds.upper)
}

/// Accepted backtracking step.
#[derive(Debug, Clone)]
pub struct ArmijoStep {
    pub u: DVector<f64>,
    pub step: f64,
    pub halvings: u32,
}

/// Largest halving cap of the backtracking searches.
pub const MAX_HALVINGS: u32 = 60;

/// Smallest `n` with `J(P(u0 − αⁿ G0)) < J(u0)`.
pub fn armijo_init(
    prob: &InnerProblem<'_>,
    u0: &DVector<f64>,
    g0: &DVector<f64>,
    alpha: f64,
) -> Result<ArmijoStep> {
    let j0 = prob.objective(u0)?;
    armijo_from(prob, u0, j0, g0, alpha, Acceptance::Strict)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Acceptance {
    /// `J(trial) < J(u0)`.
    Strict,
    /// Strict decrease, judged by the projected gradient once the predicted decrease
    /// `t‖P G‖²` is below the resolution of `J`.
    RoundingAware,
    /// As `RoundingAware` but requiring `J(trial) ≤ J(u0) − ‖trial − u0‖²/(2t)`.
    Sufficient,
}

fn armijo_from(
    prob: &InnerProblem<'_>,
    u0: &DVector<f64>,
    j0: f64,
    g0: &DVector<f64>,
    alpha: f64,
    mode: Acceptance,
) -> Result<ArmijoStep> {
    if g0.iter().all(|&x| x == 0.0) {
        return Err(Error::Precondition(
            "Armijo search needs a nonzero gradient",
        ));
    }
    let bounds = prob.bounds();
    let pg0 = projected_gradient(u0, g0, bounds).norm();
    let mut step = 1.0;
    for halvings in 0..=MAX_HALVINGS {
        let trial = project_box(&(u0 - g0 * step), bounds);
        let jt = prob.objective(&trial)?;
        let unresolved = step * pg0 * pg0 <= OBJECTIVE_RESOLUTION * (1.0 + j0.abs());
        let accept = match mode {
            Acceptance::Strict => jt < j0,
            _ if unresolved => {
                let gt = prob.gradient(&trial)?;
                projected_gradient(&trial, &gt, bounds).norm() < pg0
            }
            Acceptance::RoundingAware => jt < j0,
            Acceptance::Sufficient => {
                jt < j0 && jt <= j0 - (&trial - u0).norm_squared() / (2.0 * step)
            }
        };
        if accept {
            return Ok(ArmijoStep {
                u: trial,
                step,
                halvings,
            });
        }
        step *= alpha;
    }
    Err(Error::Stagnation {
        stage: "inner Armijo search",
        halvings: MAX_HALVINGS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerOptions {
    /// Stationarity tolerance on the (projected) gradient norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Backtracking factor.
    pub alpha: f64,
    /// Require `J(x⁺) ≤ J(x) − ‖x⁺ − x‖²/(2t)` when choosing the Nesterov step instead
    /// of plain decrease.
    pub sufficient_decrease: bool,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 5000,
            alpha: 0.5,
            sufficient_decrease: true,
        }
    }
}

/// Why the Nesterov loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStatus {
    Converged,
    MaxIterations,
    /// No decrease could be resolved in floating point.
    Stagnated,
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub p: DVector<f64>,
    pub objective: f64,
    pub gradient: DVector<f64>,
    /// `‖G(u)‖`.
    pub grad_norm: f64,
    /// Norm of the gradient restricted to directions not blocked by the box.
    pub projected_grad_norm: f64,
    /// Gradient steps taken (Armijo bootstrap included).
    pub iterations: usize,
    pub restarts: usize,
    pub status: InnerStatus,
    pub on_boundary: bool,
}

impl InnerSolution {
    pub fn converged(&self) -> bool {
        self.status == InnerStatus::Converged
    }

    fn from_eval(
        ev: Evaluation,
        bounds: Bounds,
        iterations: usize,
        restarts: usize,
        status: InnerStatus,
    ) -> Self {
        let projected_grad_norm = projected_gradient(&ev.u, &ev.gradient, bounds).norm();
        Self {
            grad_norm: ev.gradient.norm(),
            projected_grad_norm,
            on_boundary: touches_bounds(&ev.u, bounds),
            u: ev.u,
            y: ev.y,
            p: ev.p,
            objective: ev.objective,
            gradient: ev.gradient,
            iterations,
            restarts,
            status,
        }
    }
}

/// Relative size of objective increases attributed to rounding rather than divergence.
const RESTART_SLACK: f64 = 1e-14;

/// Relative accuracy of `J` (state solves lose about `log10(N²)` digits).
const OBJECTIVE_RESOLUTION: f64 = 1e-13;

/// Projected Nesterov iterations with an Armijo-chosen step and function-value restart.
///
/// `x_n = P(v_n − t G(v_n))`, `v_{n+1} = P(x_n + (n−1)/(n+2) (x_n − x_{n−1}))`. Whenever
/// the objective increases, momentum is reset and the step is re-chosen by Armijo.
/// Close to a minimizer, where changes of `J` are below its rounding error, increases
/// are measured on the projected gradient norm instead.
pub fn nesterov_solve(
    prob: &InnerProblem<'_>,
    u_init: &DVector<f64>,
    opts: &InnerOptions,
) -> Result<InnerSolution> {
    let bounds = prob.bounds();
    prob.space.check(u_init)?;
    let stationarity = |ev: &Evaluation| projected_gradient(&ev.u, &ev.gradient, bounds).norm();

    let mut cur = prob.evaluate(&project_box(u_init, bounds))?;
    if stationarity(&cur) <= opts.tol {
        return Ok(InnerSolution::from_eval(
            cur,
            bounds,
            0,
            0,
            InnerStatus::Converged,
        ));
    }

    let mode = if opts.sufficient_decrease {
        Acceptance::Sufficient
    } else {
        Acceptance::RoundingAware
    };
    let mut restarts = 0;
    let mut prev_u = cur.u.clone();
    let (mut step, mut next) =
        match armijo_from(prob, &cur.u, cur.objective, &cur.gradient, opts.alpha, mode) {
            Ok(s) => (s.step, prob.evaluate(&s.u)?),
            Err(Error::Stagnation { .. }) => {
                return Ok(InnerSolution::from_eval(
                    cur,
                    bounds,
                    0,
                    0,
                    InnerStatus::Stagnated,
                ))
            }
            Err(e) => return Err(e),
        };
    std::mem::swap(&mut cur, &mut next);
    let mut iterations = 1;
    let mut momentum_steps = 1usize;

    let status = loop {
        if stationarity(&cur) <= opts.tol {
            break InnerStatus::Converged;
        }
        if iterations >= opts.max_iter {
            break InnerStatus::MaxIterations;
        }
        let n = momentum_steps as f64;
        let beta = (n - 1.0) / (n + 2.0);
        let look = if beta > 0.0 {
            let v = project_box(&(&cur.u + (&cur.u - &prev_u) * beta), bounds);
            prob.evaluate(&v)?
        } else {
            cur.clone()
        };
        let trial = prob.evaluate(&project_box(&(&look.u - &look.gradient * step), bounds))?;
        iterations += 1;

        let pg = stationarity(&cur);
        let increased = if step * pg * pg <= OBJECTIVE_RESOLUTION * (1.0 + cur.objective.abs()) {
            stationarity(&trial) >= pg
        } else {
            trial.objective > cur.objective + RESTART_SLACK * cur.objective.abs()
        };
        if increased {
            restarts += 1;
            match armijo_from(prob, &cur.u, cur.objective, &cur.gradient, opts.alpha, mode) {
                Ok(s) => {
                    step = s.step;
                    prev_u = cur.u.clone();
                    cur = prob.evaluate(&s.u)?;
                    momentum_steps = 1;
                }
                Err(Error::Stagnation { .. }) => break InnerStatus::Stagnated,
                Err(e) => return Err(e),
            }
        } else {
            prev_u = std::mem::replace(&mut cur, trial).u;
            momentum_steps += 1;
        }
    };
    Ok(InnerSolution::from_eval(
        cur, bounds, iterations, restarts, status,
    ))
}
