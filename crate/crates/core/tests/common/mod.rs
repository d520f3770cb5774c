//! Shared oracles for the integration tests.
//!
//! Everything here works on plain slices and re-derives what it needs from the weight
//! layout, so that the checks do not go through the code paths they are checking.

#![allow(dead_code)]

use learnreg::mlp::{self, Activation, Architecture, Layer, Network, WeightVector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both agree exactly.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    if diff == 0.0 {
        return 0.0;
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    rel_err(a.as_slice(), b.as_slice())
}

fn rho(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Tanh => x.tanh(),
        Activation::Softplus => x.exp().ln_1p(),
        Activation::Identity => x,
    }
}

/// Plain recursive evaluation of the network from its flat weights
/// (per layer: `A` row-major, then `b`).
pub fn reference_forward(widths: &[usize], kind: Activation, flat: &[f64], u: &[f64]) -> Vec<f64> {
    let mut z = u.to_vec();
    let mut pos = 0;
    for (l, pair) in widths.windows(2).enumerate() {
        let (n_in, n_out) = (pair[0], pair[1]);
        let input: Vec<f64> = if l == 0 {
            z.clone()
        } else {
            z.iter().map(|&x| rho(kind, x)).collect()
        };
        let a = &flat[pos..pos + n_in * n_out];
        let b = &flat[pos + n_in * n_out..pos + n_in * n_out + n_out];
        pos += n_in * n_out + n_out;
        z = (0..n_out)
            .map(|i| b[i] + (0..n_in).map(|j| a[i * n_in + j] * input[j]).sum::<f64>())
            .collect();
    }
    assert_eq!(pos, flat.len());
    z
}

pub const ACTIVATIONS: [Activation; 3] =
    [Activation::Tanh, Activation::Softplus, Activation::Identity];

/// Random widths up to `[4, 8, 8, 1]` with one or two hidden layers.
pub fn random_widths<R: Rng>(rng: &mut R) -> Vec<usize> {
    let mut widths = vec![rng.random_range(1..=4)];
    for _ in 0..rng.random_range(1..=2) {
        widths.push(rng.random_range(1..=8));
    }
    widths.push(1);
    widths
}

/// Network with i.i.d. `U[-1, 1]` entries.
pub fn random_network<R: Rng>(widths: Vec<usize>, kind: Activation, rng: &mut R) -> Network {
    let arch = Architecture::new(widths, kind).unwrap();
    let w = WeightVector::random_uniform(&arch, -1.0, 1.0, rng);
    Network::new(arch, w).unwrap()
}

pub fn random_vector<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Random direction with `U[-1, 1]` entries shaped like `layer`.
pub fn random_direction<R: Rng>(layer: &Layer, rng: &mut R) -> Layer {
    Layer {
        a: DMatrix::from_fn(layer.a.nrows(), layer.a.ncols(), |_, _| {
            rng.random_range(-1.0..1.0)
        }),
        b: DVector::from_fn(layer.b.len(), |_, _| rng.random_range(-1.0..1.0)),
    }
}

/// `w + t·dir` with `dir` placed in layer `l` (1-based).
pub fn perturb_layer(w: &WeightVector, l: usize, dir: &Layer, t: f64) -> WeightVector {
    let mut out = w.clone();
    out.layers[l - 1].a += &dir.a * t;
    out.layers[l - 1].b += &dir.b * t;
    out
}

/// Central difference `(f(x + h) − f(x − h)) / 2h` of a vector-valued map along one scalar.
pub fn central<F: Fn(f64) -> Vec<f64>>(f: F, h: f64) -> Vec<f64> {
    let p = f(h);
    let m = f(-h);
    p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// Worst relative errors of one network against finite differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct DerivativeErrors {
    /// Forward pass against [`reference_forward`].
    pub forward: f64,
    /// `jacobian_u` and `jacobian_w` against differences of the forward pass.
    pub first_order: f64,
    /// `hessian_uu` and `mixed_uw` against differences of `jacobian_u`.
    pub second_order: f64,
}

impl DerivativeErrors {
    pub fn max(self, other: Self) -> Self {
        Self {
            forward: self.forward.max(other.forward),
            first_order: self.first_order.max(other.first_order),
            second_order: self.second_order.max(other.second_order),
        }
    }
}

const FD_STEP: f64 = 1e-5;

fn jac_at(net: &Network, w: &WeightVector, u: &DVector<f64>) -> DMatrix<f64> {
    let (_, tape) = mlp::forward(w, &net.arch, u).unwrap();
    mlp::jacobian_u(w, &tape).unwrap()
}

fn out_at(net: &Network, w: &WeightVector, u: &DVector<f64>) -> Vec<f64> {
    mlp::forward(w, &net.arch, u).unwrap().0.as_slice().to_vec()
}

/// Checks all four derivative operations of `net` at `u`, weight directions drawn from `rng`.
pub fn check_network<R: Rng>(net: &Network, u: &DVector<f64>, rng: &mut R) -> DerivativeErrors {
    let w = &net.weights;
    let n = u.len();
    let (r, tape) = mlp::forward(w, &net.arch, u).unwrap();
    let reference = reference_forward(
        net.arch.widths(),
        net.arch.activation(),
        &w.to_flat(),
        u.as_slice(),
    );
    let mut errs = DerivativeErrors {
        forward: rel_err(r.as_slice(), &reference),
        ..Default::default()
    };

    // ∂r/∂u column by column
    let jac = mlp::jacobian_u(w, &tape).unwrap();
    for j in 0..n {
        let fd = central(
            |t| {
                let mut v = u.clone();
                v[j] += t;
                out_at(net, w, &v)
            },
            FD_STEP,
        );
        errs.first_order = errs.first_order.max(rel_err(jac.column(j).as_slice(), &fd));
    }

    // ∂²r/∂u² against differences of the Jacobian
    let hess = mlp::hessian_uu(w, &tape).unwrap();
    for j in 0..n {
        let fd = central(
            |t| {
                let mut v = u.clone();
                v[j] += t;
                jac_at(net, w, &v).as_slice().to_vec()
            },
            FD_STEP,
        );
        // fd holds ∂J/∂u_j laid out like J (n_out × n_in, column-major)
        let n_out = r.len();
        let analytic: Vec<f64> = (0..n)
            .flat_map(|k| (0..n_out).map(move |i| (i, k)))
            .map(|(i, k)| hess[i][(k, j)])
            .collect();
        errs.second_order = errs.second_order.max(rel_err(&analytic, &fd));
    }

    for l in 1..=w.layers.len() {
        let dir = random_direction(&w.layers[l - 1], rng);
        let dr = mlp::jacobian_w(w, &tape, l, &dir).unwrap();
        let fd = central(|t| out_at(net, &perturb_layer(w, l, &dir, t), u), FD_STEP);
        errs.first_order = errs.first_order.max(rel_err(dr.as_slice(), &fd));

        let mixed = mlp::mixed_uw(w, &tape, l, &dir).unwrap();
        let fd = central(
            |t| {
                jac_at(net, &perturb_layer(w, l, &dir, t), u)
                    .as_slice()
                    .to_vec()
            },
            FD_STEP,
        );
        errs.second_order = errs.second_order.max(rel_err(mixed.as_slice(), &fd));
    }
    errs
}

/// Runs [`check_network`] on `count` seeded random networks, cycling through the activations.
pub fn derivative_suite(count: usize, seed: u64) -> DerivativeErrors {
    let mut rng = rng(seed);
    let mut worst = DerivativeErrors::default();
    for i in 0..count {
        let widths = random_widths(&mut rng);
        let net = random_network(widths, ACTIVATIONS[i % 3], &mut rng);
        let u = random_vector(net.arch.n_in(), -1.0, 1.0, &mut rng);
        worst = worst.max(check_network(&net, &u, &mut rng));
    }
    worst
}

#[allow(unused_imports)]
pub use inner_oracles::*;

mod inner_oracles {
    use super::*;
    use learnreg::datagen::{gen_l2_dataset, GenConfig};
    use learnreg::fem::{solve_state, Bounds, ControlSpace, Mesh, ProblemData};
    use learnreg::inner::{Gamma, InnerOptions, InnerProblem, Regularizer};
    use learnreg::outer::{
        assemble_hessian, assemble_hessian_raw, outer_gradient, outer_objective, OuterConfig,
    };

    /// Owned data of one inner problem.
    pub struct InnerInstance {
        pub space: ControlSpace,
        pub data: ProblemData,
        pub z_hat: DVector<f64>,
        pub reg: Regularizer,
        /// Evaluation point, strictly inside the box.
        pub u: DVector<f64>,
    }

    impl InnerInstance {
        pub fn problem(&self) -> InnerProblem<'_> {
            InnerProblem::new(&self.space, &self.data, &self.z_hat, &self.reg).unwrap()
        }
    }

    /// Random source, boundary data, perturbed target and a small random regularizer.
    pub fn inner_instance(seed: u64, cells: usize, n_in: usize) -> InnerInstance {
        let mut rng = rng(seed);
        let mesh = Mesh::new(cells).unwrap();
        let space = ControlSpace::blocks(mesh, n_in, Bounds::default()).unwrap();
        let data = ProblemData {
            f: (0..cells).map(|_| rng.random_range(0.5..3.0)).collect(),
            g: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        };
        let u_true = random_vector(n_in, 0.5, 2.0, &mut rng);
        let mut z_hat = solve_state(&space, &u_true, &data).unwrap();
        for i in 1..cells {
            z_hat[i] += 0.05 * rng.random_range(-1.0..1.0);
        }
        let kind = if seed.is_multiple_of(2) {
            Activation::Tanh
        } else {
            Activation::Softplus
        };
        let arch = Architecture::new(vec![n_in, 5, 1], kind).unwrap();
        let w = WeightVector::random_uniform(&arch, -0.5, 0.5, &mut rng);
        let reg = Regularizer::new(Network::new(arch, w).unwrap(), Gamma::Identity).unwrap();
        let u = random_vector(n_in, 0.5, 2.0, &mut rng);
        InnerInstance {
            space,
            data,
            z_hat,
            reg,
            u,
        }
    }

    /// Relative error of the adjoint gradient against central differences of the objective.
    pub fn inner_gradient_error(inst: &InnerInstance) -> f64 {
        let prob = inst.problem();
        let g = prob.gradient(&inst.u).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..inst.u.len())
            .map(|j| {
                let mut up = inst.u.clone();
                let mut um = inst.u.clone();
                up[j] += h;
                um[j] -= h;
                (prob.objective(&up).unwrap() - prob.objective(&um).unwrap()) / (2.0 * h)
            })
            .collect();
        rel_err(g.as_slice(), &fd)
    }

    /// `(error of the raw Hessian against differences of the gradient,
    ///   relative asymmetry of the raw Hessian,
    ///   error of the symmetrized Hessian)`.
    pub fn hessian_errors(inst: &InnerInstance) -> (f64, f64, f64) {
        let prob = inst.problem();
        let ev = prob.evaluate(&inst.u).unwrap();
        let raw = assemble_hessian_raw(&prob, &inst.u, &ev.y, &ev.p).unwrap();
        let sym = assemble_hessian(&prob, &inst.u, &ev.y, &ev.p).unwrap();
        let n = inst.u.len();
        let h = 1e-5;
        let mut fd = DMatrix::zeros(n, n);
        for j in 0..n {
            let col = central(
                |t| {
                    let mut v = inst.u.clone();
                    v[j] += t;
                    prob.gradient(&v).unwrap().as_slice().to_vec()
                },
                h,
            );
            fd.set_column(j, &DVector::from_vec(col));
        }
        let asym = (&raw - raw.transpose()).norm() / raw.norm();
        (rel_err_mat(&raw, &fd), asym, rel_err_mat(&sym, &fd))
    }

    /// Relative error of the outer gradient against central differences of the outer
    /// objective, on a single scalar-control datum and a `[1, 2, 1]` tanh network.
    pub fn bilevel_error(seed: u64, nu: f64, centered: bool) -> f64 {
        let cfg = GenConfig {
            k: 1,
            n_in: 1,
            cells: 50,
            f: 10.0,
            seed,
            ..Default::default()
        };
        let ds = gen_l2_dataset(&cfg).unwrap();
        let arch = Architecture::new(vec![1, 2, 1], Activation::Tanh).unwrap();
        let w = WeightVector::random_normal(&arch, 0.5, &mut rng(seed));
        let mut reg = Regularizer::new(
            Network::new(arch.clone(), w.clone()).unwrap(),
            Gamma::Identity,
        )
        .unwrap();
        if centered {
            reg = reg.with_center(ds.mean_control()).unwrap();
        }
        let conf = OuterConfig {
            nu,
            inner: InnerOptions {
                tol: 1e-12,
                max_iter: 100_000,
                ..Default::default()
            },
            ..Default::default()
        };
        let g = outer_gradient(&ds, &reg, &conf).unwrap().gradient.to_flat();
        let flat = w.to_flat();
        let at = |x: Vec<f64>| {
            let net =
                Network::new(arch.clone(), WeightVector::from_flat(&arch, &x).unwrap()).unwrap();
            outer_objective(&ds, &Regularizer { net, ..reg.clone() }, &conf).unwrap()
        };
        let h = 1e-5;
        let fd: Vec<f64> = (0..flat.len())
            .map(|i| {
                let mut p = flat.clone();
                let mut m = flat.clone();
                p[i] += h;
                m[i] -= h;
                (at(p) - at(m)) / (2.0 * h)
            })
            .collect();
        rel_err(&g, &fd)
    }
}

#[allow(unused_imports)]
pub use fem_oracles::*;

mod fem_oracles {
    use super::*;
    use learnreg::fem::{
        h1_norm, h1_seminorm, l2_norm, solve_state, Bounds, ControlSpace, Mesh, ProblemData,
    };
    use std::f64::consts::PI;

    fn one_group(cells: usize) -> ControlSpace {
        ControlSpace::blocks(Mesh::new(cells).unwrap(), 1, Bounds::default()).unwrap()
    }

    /// Largest nodal error over the three closed-form cases:
    /// linear harmonic solution, two-material flux continuity, constant source.
    pub fn exactness_errors() -> [f64; 3] {
        let space = one_group(8);
        let mesh = space.mesh();
        let u = DVector::from_element(1, 1.0);
        let y = solve_state(&space, &u, &ProblemData::uniform(mesh, 0.0, (0.0, 1.0))).unwrap();
        let linear = (0..mesh.nodes())
            .map(|i| (y[i] - mesh.node(i)).abs())
            .fold(0.0, f64::max);

        let two = ControlSpace::blocks(mesh, 2, Bounds::default()).unwrap();
        let y = solve_state(
            &two,
            &DVector::from_vec(vec![1.0, 2.0]),
            &ProblemData::uniform(mesh, 0.0, (0.0, 1.0)),
        )
        .unwrap();
        let flux = (y[mesh.cells() / 2] - 2.0 / 3.0).abs();

        let y = solve_state(&space, &u, &ProblemData::uniform(mesh, 1.0, (0.0, 0.0))).unwrap();
        let parabola = (0..mesh.nodes())
            .map(|i| {
                let x = mesh.node(i);
                (y[i] - x * (1.0 - x) / 2.0).abs()
            })
            .fold(0.0, f64::max);
        [linear, flux, parabola]
    }

    /// L² errors of the P1 solution for `y = sin(πx)`, `u ≡ 1`, with `f = π² sin(πx)`
    /// averaged over each cell, for `N = 10, 20, 40, 80`.
    pub fn convergence_errors() -> Vec<(usize, f64)> {
        [10, 20, 40, 80]
            .into_iter()
            .map(|n| {
                let space = one_group(n);
                let mesh = space.mesh();
                let h = mesh.h();
                let f = (0..n)
                    .map(|c| {
                        let (a, b) = (mesh.node(c), mesh.node(c + 1));
                        PI * ((PI * a).cos() - (PI * b).cos()) / h
                    })
                    .collect();
                let data = ProblemData { f, g: (0.0, 0.0) };
                let y = solve_state(&space, &DVector::from_element(1, 1.0), &data).unwrap();
                let err = DVector::from_fn(mesh.nodes(), |i, _| y[i] - (PI * mesh.node(i)).sin());
                (n, l2_norm(mesh, &err).unwrap())
            })
            .collect()
    }

    pub fn observed_orders(errors: &[(usize, f64)]) -> Vec<f64> {
        errors
            .windows(2)
            .map(|p| (p[0].1 / p[1].1).log2())
            .collect()
    }

    /// Worst ratios `lhs / rhs` over `pairs` seeded random pairs for
    /// `‖y₁ − y₂‖_{H¹₀} ≤ (1/m²) ‖u₁ − u₂‖_∞ (‖f‖ + M‖g‖)` and
    /// `‖y‖_{H¹} ≤ 2.5 (1/m) (‖f‖ + M‖g‖)`,
    /// with `‖f‖` the L² norm and `‖g‖ = |g_l| + |g_r|`.
    pub fn stability_ratios(pairs: usize, seed: u64) -> (f64, f64) {
        let mut rng = rng(seed);
        let mut lipschitz: f64 = 0.0;
        let mut wellposed: f64 = 0.0;
        for _ in 0..pairs {
            let cells = rng.random_range(10..=60);
            let groups = rng.random_range(1..=10);
            let m = rng.random_range(0.1..1.0);
            let big_m = m + rng.random_range(0.1..5.0);
            let mesh = Mesh::new(cells).unwrap();
            let space = ControlSpace::blocks(mesh, groups, Bounds::new(m, big_m).unwrap()).unwrap();
            let data = ProblemData {
                f: (0..cells).map(|_| rng.random_range(-3.0..3.0)).collect(),
                g: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            };
            let u1 = random_vector(groups, m, big_m, &mut rng);
            let u2 = random_vector(groups, m, big_m, &mut rng);
            let y1 = solve_state(&space, &u1, &data).unwrap();
            let y2 = solve_state(&space, &u2, &data).unwrap();
            let source = data.f_l2(mesh) + big_m * (data.g.0.abs() + data.g.1.abs());

            let du = (&u1 - &u2).amax();
            let lhs = h1_seminorm(mesh, &(&y1 - &y2)).unwrap();
            lipschitz = lipschitz.max(lhs / (du * source / (m * m)));

            let y_norm = h1_norm(mesh, &y1).unwrap().max(h1_norm(mesh, &y2).unwrap());
            wellposed = wellposed.max(y_norm / (2.5 * source / m));
        }
        (lipschitz, wellposed)
    }
}

#[allow(unused_imports)]
pub use shift_oracles::*;

mod shift_oracles {
    use super::*;
    use learnreg::outer::{epsilon_shift, factorizes, ShiftSign};

    /// `B Bᵀ` with `B` an `n × rank` matrix of `U[-1, 1]` entries.
    pub fn gram<R: Rng>(n: usize, rank: usize, rng: &mut R) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose()
    }

    /// Residual of an LU solve with the shifted matrix, or infinity if it fails.
    fn solve_residual(h: &DMatrix<f64>) -> f64 {
        let rhs = DVector::from_fn(h.nrows(), |i, _| 1.0 + i as f64);
        match h.clone().lu().solve(&rhs) {
            Some(x) => (h * x - &rhs).norm() / rhs.norm(),
            None => f64::INFINITY,
        }
    }

    /// `(singular cases tried, failures, well-conditioned cases with ε > 0)`.
    pub fn shift_corpus(seed: u64) -> (usize, usize, usize) {
        let mut rng = rng(seed);
        let mut cases = 0;
        let mut failures = 0;
        for n in 1..=10 {
            for rank in 0..n {
                for sign in [ShiftSign::Plus, ShiftSign::Minus] {
                    for eps in [1e-8, 1e-3, 0.0] {
                        let h = gram(n, rank, &mut rng);
                        let (shifted, used) = epsilon_shift(&h, eps, sign);
                        cases += 1;
                        let ok =
                            used >= 0.0 && factorizes(&shifted) && solve_residual(&shifted) < 1e-6;
                        if !ok {
                            failures += 1;
                        }
                    }
                }
            }
        }
        let mut shifted_well = 0;
        for n in 1..=10 {
            for _ in 0..5 {
                let h = gram(n, n, &mut rng) + DMatrix::identity(n, n);
                let (out, used) = epsilon_shift(&h, 1e-8, ShiftSign::Plus);
                if used != 0.0 || out != h {
                    shifted_well += 1;
                }
            }
        }
        (cases, failures, shifted_well)
    }
}
