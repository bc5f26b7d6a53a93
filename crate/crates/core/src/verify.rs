//! Exact checks of policies on the two-point noise tree: cost differences under
//! a one-stage perturbation, the quadratic form of the homogeneous perturbation
//! cost, the defining equilibrium inequality, and cross-solver reductions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::equilibrium::{stationarity_residual, EquilibriumPolicy};
use crate::error::{Error, Result};
use crate::linalg::{self, Tolerances};
use crate::model::ProblemSpec;
use crate::recursions::{self, BackwardTables};
use crate::scalar::{Mat, Scalar, Vector};
use crate::simulate::{tree_cost, NodeRule, NoiseTree};

pub const DEFAULT_LAMBDAS: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];

/// Per-coordinate grid of control deviations tried at each node.
pub fn default_grid() -> Vec<f64> {
    vec![-2.0, -1.0, 0.0, 1.0, 2.0]
}

/// `count` standard normal perturbation directions in `R^m`, reproducible from `seed`.
pub fn probe_directions(m: usize, count: usize, seed: u64) -> Vec<Vector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Vector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// A one-stage perturbation direction: one vector for every node, or a
/// separate vector per stage-`k` node.
#[derive(Debug, Clone)]
pub enum Direction<T: Scalar> {
    Fixed(Vector<T>),
    PerNode(Vec<Vector<T>>),
}

impl<T: Scalar> Direction<T> {
    fn at(&self, node: usize) -> &Vector<T> {
        match self {
            Direction::Fixed(v) => v,
            Direction::PerNode(vs) => &vs[node],
        }
    }
}

/// Cost difference `D(λ)` at one node, with fitted and predicted coefficients of
/// `D(λ) = a λ + b λ²`.
#[derive(Debug, Clone, Serialize)]
pub struct NodeProbe {
    pub node: usize,
    pub direction: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub differences: Vec<f64>,
    pub a: f64,
    pub b: f64,
    /// `2 rᵀū` with `r` the stationarity residual at the node.
    pub a_predicted: f64,
    /// `ūᵀ 𝕆_k ū`
    pub b_predicted: f64,
    /// Largest deviation of `D` from the fitted parabola.
    pub fit_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationProbe {
    pub k: usize,
    pub nodes: Vec<NodeProbe>,
    pub max_a_error: f64,
    pub max_b_error: f64,
    pub max_fit_residual: f64,
}

/// Tables matching the policy's `Φ`, started at the policy's first stage.
pub fn policy_tables<T: Scalar>(
    spec: &ProblemSpec<T>,
    policy: &EquilibriumPolicy<T>,
    tol: &Tolerances,
) -> Result<BackwardTables<T>> {
    let phi = recursions::full_phi(spec, policy.t, &policy.phis);
    recursions::mixed_backward(spec, &phi, policy.t, tol)
}

fn check_stage<T: Scalar>(tree: &NoiseTree<T>, k: usize) -> Result<()> {
    if k < tree.t || k >= tree.horizon {
        return Err(Error::Index(format!("stage {k} outside {}..{}", tree.t, tree.horizon)));
    }
    Ok(())
}

/// Least-squares fit of `D(λ) = a λ + b λ²`, returning `(a, b, max residual)`.
fn fit_parabola(lambdas: &[f64], d: &[f64]) -> (f64, f64, f64) {
    let (mut s2, mut s3, mut s4, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&l, &v) in lambdas.iter().zip(d) {
        s2 += l * l;
        s3 += l * l * l;
        s4 += l * l * l * l;
        y1 += l * v;
        y2 += l * l * v;
    }
    let det = s2 * s4 - s3 * s3;
    let a = (y1 * s4 - y2 * s3) / det;
    let b = (s2 * y2 - s3 * y1) / det;
    let res = lambdas
        .iter()
        .zip(d)
        .map(|(&l, &v)| (v - a * l - b * l * l).abs())
        .fold(0.0, f64::max);
    (a, b, res)
}

/// Measures `D(λ) = J(k, X*_k; u_k + λū, tail) - J(k, X*_k; u_k, tail)` exactly at
/// every stage-`k` node of `tree` and compares the fitted coefficients with the
/// prediction from `tables`.
///
/// The prediction assumes the policy agrees with `tables` at every stage after `k`.
pub fn check_cost_difference<T: Scalar>(
    spec: &ProblemSpec<T>,
    policy: &EquilibriumPolicy<T>,
    tables: &BackwardTables<T>,
    tree: &NoiseTree<T>,
    k: usize,
    direction: &Direction<T>,
    lambdas: &[f64],
) -> Result<PerturbationProbe> {
    check_stage(tree, k)?;
    if lambdas.iter().filter(|l| **l != 0.0).count() < 2 {
        return Err(Error::Schema("need at least two nonzero λ values".into()));
    }
    if let Direction::PerNode(v) = direction {
        if v.len() != tree.width(k) {
            return Err(Error::Index(format!(
                "direction lists {} nodes, stage {k} has {}",
                v.len(),
                tree.width(k)
            )));
        }
    }
    let base = NodeRule::from_policy(policy, tree);
    let oo = &tables.op(k).oo;
    let mut nodes = Vec::with_capacity(tree.width(k));
    for node in 0..tree.width(k) {
        let ubar = direction.at(node);
        let j0 = tree_cost(spec, tree, k, node, &base)?;
        let mut diffs = Vec::with_capacity(lambdas.len());
        for &lam in lambdas {
            let mut rule = base.clone();
            *rule.offset_mut(k, node) += ubar * T::lit(lam);
            diffs.push((tree_cost(spec, tree, k, node, &rule)? - j0).as_f64());
        }
        let (a, b, fit_residual) = fit_parabola(lambdas, &diffs);
        let r = stationarity_residual(policy, tables, tree.state(k, node), k);
        nodes.push(NodeProbe {
            node,
            direction: ubar.iter().map(|v| v.as_f64()).collect(),
            lambdas: lambdas.to_vec(),
            differences: diffs,
            a,
            b,
            a_predicted: (T::lit(2.0) * r.dot(ubar)).as_f64(),
            b_predicted: ubar.dot(&(oo * ubar)).as_f64(),
            fit_residual,
        });
    }
    let max = |f: &dyn Fn(&NodeProbe) -> f64| nodes.iter().map(f).fold(0.0, f64::max);
    Ok(PerturbationProbe {
        k,
        max_a_error: max(&|p| (p.a - p.a_predicted).abs()),
        max_b_error: max(&|p| (p.b - p.b_predicted).abs()),
        max_fit_residual: max(&|p| p.fit_residual),
        nodes,
    })
}

/// Cost of the perturbation state started from zero at stage `k`: control `ū`
/// at stage `k`, then `Φ_l α_l`, with every expectation taken over the
/// two-point subtree. Only quadratic terms enter.
pub fn perturbation_cost<T: Scalar>(spec: &ProblemSpec<T>, phi: &[Mat<T>], k: usize, ubar: &Vector<T>) -> Result<T> {
    if spec.p != 1 {
        return Err(Error::Unsupported(format!(
            "the noise tree needs a single channel, problem has p = {}",
            spec.p
        )));
    }
    if k >= spec.horizon || phi.len() != spec.horizon {
        return Err(Error::Index(format!("stage {k} or gain list of length {}", phi.len())));
    }
    let mut alpha = vec![Vector::zeros(spec.n)];
    let mut cost = T::zero();
    for l in k..spec.horizon {
        let st = spec.stage(k, l);
        let inv = T::one() / T::lit(alpha.len() as f64);
        let u: Vec<Vector<T>> = if l == k {
            vec![ubar.clone()]
        } else {
            alpha.iter().map(|a| &phi[l] * a).collect()
        };
        let ma = alpha.iter().fold(Vector::zeros(spec.n), |s, a| s + a) * inv;
        let mu = u.iter().fold(Vector::zeros(spec.m), |s, v| s + v) * inv;
        let mut quad = T::zero();
        for (a, v) in alpha.iter().zip(&u) {
            quad += a.dot(&(&st.q * a)) + v.dot(&(&st.r * v));
        }
        cost += quad * inv + ma.dot(&(&st.q_bar * &ma)) + mu.dot(&(&st.r_bar * &mu));
        let s = spec.delta(l)[(0, 0)].max(T::zero()).sqrt();
        let mut next = Vec::with_capacity(alpha.len() * 2);
        for (a, v) in alpha.iter().zip(&u) {
            let drift = &st.a * a + &st.a_bar * &ma + &st.b * v + &st.b_bar * &mu;
            let vol = &st.c[0] * a + &st.c_bar[0] * &ma + &st.d[0] * v + &st.d_bar[0] * &mu;
            next.push(&drift - &vol * s);
            next.push(&drift + &vol * s);
        }
        alpha = next;
    }
    let tm = spec.terminal(k);
    let inv = T::one() / T::lit(alpha.len() as f64);
    let ma = alpha.iter().fold(Vector::zeros(spec.n), |s, a| s + a) * inv;
    let quad = alpha.iter().fold(T::zero(), |s, a| s + a.dot(&(&tm.weight * a)));
    Ok(cost + quad * inv + ma.dot(&(&tm.weight_bar * &ma)))
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub k: usize,
    pub propagated: f64,
    pub quadratic_form: f64,
    pub residual: f64,
}

/// `|J̃(k, 0; ū) - ūᵀ 𝕆_k ū|` for the mixed tables of `Φ` (one gain per stage `0..N`).
pub fn check_jtilde_identity<T: Scalar>(
    spec: &ProblemSpec<T>,
    phi: &[Mat<T>],
    t: usize,
    k: usize,
    ubar: &Vector<T>,
    tol: &Tolerances,
) -> Result<IdentityCheck> {
    if k < t {
        return Err(Error::Index(format!("stage {k} precedes the start stage {t}")));
    }
    let tables = recursions::mixed_backward(spec, phi, t, tol)?;
    let propagated = perturbation_cost(spec, phi, k, ubar)?.as_f64();
    let quadratic_form = ubar.dot(&(&tables.op(k).oo * ubar)).as_f64();
    Ok(IdentityCheck {
        k,
        propagated,
        quadratic_form,
        residual: (propagated - quadratic_form).abs(),
    })
}

/// Outcome of the equilibrium inequality at the nodes of one stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageInequality {
    pub k: usize,
    pub nodes: usize,
    /// Smallest `J(deviation) - J(policy)` over nodes, grid points and the
    /// minimizer of the recovered quadratic.
    pub worst_margin: f64,
    pub worst_node: usize,
    /// Largest stationarity residual `|r|` recovered from symmetric differences.
    pub max_linear_term: f64,
    /// Smallest eigenvalue of the recovered quadratic term.
    pub min_curvature: f64,
    pub grid_pass: bool,
    pub certificate_pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    pub stages: Vec<StageInequality>,
    pub worst_margin: f64,
    pub pass: bool,
}

/// Margin below which a grid deviation counts as an improvement.
pub const MARGIN_TOL: f64 = 1e-9;

fn grid_points(grid: &[f64], m: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![]];
    for _ in 0..m {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                grid.iter().map(move |&g| {
                    let mut q = p.clone();
                    q.push(g);
                    q
                })
            })
            .collect();
    }
    pts
}

/// Checks that no one-stage deviation at any stage-`k` node lowers the
/// conditional cost, for every `k` in `stages`.
///
/// Two tests are combined: the deviation grid itself, and a certificate read
/// off the exact quadratic structure of the cost difference (linear term zero,
/// quadratic term positive semidefinite), which covers deviations the grid misses.
pub fn check_definition_inequality<T: Scalar>(
    spec: &ProblemSpec<T>,
    policy: &EquilibriumPolicy<T>,
    tree: &NoiseTree<T>,
    stages: &[usize],
    grid: &[f64],
    tol: &Tolerances,
) -> Result<InequalityReport> {
    let base = NodeRule::from_policy(policy, tree);
    let m = spec.m;
    let points = grid_points(grid, m);
    let mut out = Vec::new();
    for &k in stages {
        check_stage(tree, k)?;
        let mut st = StageInequality {
            k,
            nodes: tree.width(k),
            worst_margin: f64::INFINITY,
            worst_node: 0,
            max_linear_term: 0.0,
            min_curvature: f64::INFINITY,
            grid_pass: true,
            certificate_pass: true,
        };
        for node in 0..tree.width(k) {
            let j0 = tree_cost(spec, tree, k, node, &base)?;
            let diff = |e: &Vector<T>| -> Result<T> {
                let mut rule = base.clone();
                *rule.offset_mut(k, node) += e;
                Ok(tree_cost(spec, tree, k, node, &rule)? - j0)
            };
            for p in &points {
                let e = Vector::from_iterator(m, p.iter().map(|v| T::lit(*v)));
                let margin = diff(&e)?.as_f64();
                if margin < st.worst_margin {
                    st.worst_margin = margin;
                    st.worst_node = node;
                }
            }
            // D(e) = 2 rᵀe + eᵀ W e, recovered from unit and pair probes.
            let unit = |i: usize| {
                let mut e = Vector::zeros(m);
                e[i] = T::one();
                e
            };
            let mut r = Vector::<T>::zeros(m);
            let mut w = Mat::<T>::zeros(m, m);
            let half = T::lit(0.5);
            let mut plus = Vec::with_capacity(m);
            for i in 0..m {
                let dp = diff(&unit(i))?;
                let dm = diff(&-unit(i))?;
                r[i] = (dp - dm) * T::lit(0.25);
                w[(i, i)] = (dp + dm) * half;
                plus.push(dp);
            }
            for i in 0..m {
                for j in i + 1..m {
                    let dij = diff(&(unit(i) + unit(j)))?;
                    let v = (dij - plus[i] - plus[j]) * half;
                    w[(i, j)] = v;
                    w[(j, i)] = v;
                }
            }
            let scale = j0.abs().max(w.norm()).max(T::one());
            let r_ok = r.norm() <= T::lit(tol.range_tol) * scale;
            let (lam, psd) = linalg::psd_margin(&w, tol)?;
            // The minimizer of the recovered quadratic joins the grid, so an
            // improving deviation between grid points still shows in the margin.
            if psd {
                let best = -(linalg::pinv(&w, tol)? * &r);
                let margin = diff(&best)?.as_f64();
                if margin < st.worst_margin {
                    st.worst_margin = margin;
                    st.worst_node = node;
                }
            }
            st.max_linear_term = st.max_linear_term.max(r.norm().as_f64());
            st.min_curvature = st.min_curvature.min(lam.as_f64());
            st.certificate_pass &= r_ok && psd;
        }
        st.grid_pass = st.worst_margin >= -MARGIN_TOL;
        out.push(st);
    }
    let worst_margin = out.iter().map(|s| s.worst_margin).fold(f64::INFINITY, f64::min);
    let pass = out.iter().all(|s| s.grid_pass && s.certificate_pass);
    Ok(InequalityReport {
        stages: out,
        worst_margin,
        pass,
    })
}

/// Deviations between the three solvers where the theory says they coincide.
#[derive(Debug, Clone, Serialize)]
pub struct ReductionReport {
    pub t: usize,
    /// Largest entrywise gap between the open-loop tables and the mixed tables with `Φ = 0`.
    pub open_vs_zero_phi: f64,
    /// Largest of `|T|`, `|𝒯|`, `|Γ|` in the mixed tables with `Φ = Φ̃`.
    pub feedback_t_gamma: f64,
    /// Largest gap between `𝒪, ℒ, θ` of those tables and `𝕆̃, 𝕃̃, θ̃`, relative to `max(1, |𝕆̃|, |𝕃̃|, |θ̃|)`.
    pub feedback_operators: f64,
}

impl ReductionReport {
    pub fn holds(&self, limit: f64) -> bool {
        self.open_vs_zero_phi <= limit && self.feedback_t_gamma <= limit && self.feedback_operators <= limit
    }
}

fn gap<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> f64 {
    (a - b).amax().as_f64()
}

fn vgap<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> f64 {
    (a - b).amax().as_f64()
}

pub fn cross_check_reductions<T: Scalar>(spec: &ProblemSpec<T>, t: usize, tol: &Tolerances) -> Result<ReductionReport> {
    let open = recursions::open_loop_backward(spec, t, tol)?;
    let zero = recursions::mixed_backward(spec, &recursions::zero_phi(spec), t, tol)?;
    let mut d1 = 0.0f64;
    for k in open.stages() {
        let (a, b) = (open.op(k), zero.op(k));
        d1 = d1
            .max(gap(&a.oo, &b.oo))
            .max(gap(&a.o, &b.o))
            .max(gap(&a.l, &b.l))
            .max(vgap(&a.theta, &b.theta))
            .max(gap(&a.gamma, &b.gamma))
            .max(vgap(&a.c, &b.c));
        for l in k..=spec.horizon {
            let (x, y) = (open.entry(k, l), zero.entry(k, l));
            d1 = d1
                .max(gap(&x.s, &y.s))
                .max(gap(&x.s_cal, &y.s_cal))
                .max(gap(&x.t, &y.t))
                .max(gap(&x.t_cal, &y.t_cal))
                .max(gap(&x.u, &y.u))
                .max(vgap(&x.pi, &y.pi));
        }
    }
    let fb = recursions::feedback_backward(spec, t, tol)?;
    let phi = recursions::full_phi(spec, t, &fb.phi());
    let mixed = recursions::mixed_backward(spec, &phi, t, tol)?;
    let (mut d2, mut d3) = (0.0f64, 0.0f64);
    for k in fb.stages() {
        let (a, b) = (fb.op(k), mixed.op(k));
        d2 = d2.max(b.gamma.amax().as_f64());
        let scale = a.oo.amax().max(a.l.amax()).max(a.theta.amax()).as_f64().max(1.0);
        d3 = d3.max(gap(&a.oo, &b.o).max(gap(&a.l, &b.l)).max(vgap(&a.theta, &b.theta)) / scale);
        for l in k..=spec.horizon {
            let e = mixed.entry(k, l);
            d2 = d2.max(e.t.amax().as_f64()).max(e.t_cal.amax().as_f64());
        }
    }
    Ok(ReductionReport {
        t,
        open_vs_zero_phi: d1,
        feedback_t_gamma: d2,
        feedback_operators: d3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::build_policy;
    use crate::model::builtin_example;
    use crate::reference;
    use nalgebra::dvector;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn parabola_fit_is_exact_on_quadratics() {
        let l = DEFAULT_LAMBDAS;
        let d: Vec<f64> = l.iter().map(|x| 3.0 * x - 0.25 * x * x).collect();
        let (a, b, r) = fit_parabola(&l, &d);
        assert!((a - 3.0).abs() < 1e-14 && (b + 0.25).abs() < 1e-14 && r < 1e-14);
    }

    #[test]
    fn grid_is_cartesian() {
        assert_eq!(grid_points(&default_grid(), 2).len(), 25);
        assert_eq!(grid_points(&[1.0], 3), vec![vec![1.0, 1.0, 1.0]]);
    }

    #[test]
    fn last_stage_quadratic_form() {
        let spec = builtin_example();
        let phi = reference::psi(2);
        let u = dvector![1.7];
        let check = check_jtilde_identity(&spec, &phi, 0, 3, &u, &tol()).unwrap();
        assert!((check.propagated - 0.4734 * 1.7 * 1.7).abs() < 1e-4);
        assert!(check.residual < 1e-12);
    }

    #[test]
    fn example_reductions() {
        let r = cross_check_reductions(&builtin_example(), 0, &tol()).unwrap();
        assert!(r.holds(1e-10), "{r:?}");
    }

    #[test]
    fn equilibrium_passes_and_shift_fails() {
        let spec = builtin_example();
        let tables = recursions::mixed_backward(&spec, &reference::psi(9), 0, &tol()).unwrap();
        let policy = build_policy(&tables);
        let x = dvector![1.0, 1.0];
        let tree = NoiseTree::build(&spec, &policy, &x, 12).unwrap();
        let all: Vec<usize> = (0..4).collect();
        let rep = check_definition_inequality(&spec, &policy, &tree, &all, &default_grid(), &tol()).unwrap();
        assert!(rep.pass, "{rep:?}");

        let mut bad = policy.clone();
        bad.offsets[1] += dvector![1.0];
        let tree = NoiseTree::build(&spec, &bad, &x, 12).unwrap();
        let rep = check_definition_inequality(&spec, &bad, &tree, &all, &default_grid(), &tol()).unwrap();
        assert!(!rep.pass);
        assert!(!rep.stages[1].certificate_pass);
    }

    #[test]
    fn null_direction_gives_zero_difference() {
        let spec = builtin_example();
        let tables = recursions::mixed_backward(&spec, &reference::psi(0), 0, &tol()).unwrap();
        let policy = build_policy(&tables);
        let tree = NoiseTree::build(&spec, &policy, &dvector![0.3, -1.0], 12).unwrap();
        let p = check_cost_difference(
            &spec,
            &policy,
            &tables,
            &tree,
            1,
            &Direction::Fixed(dvector![0.0]),
            &DEFAULT_LAMBDAS,
        )
        .unwrap();
        assert!(p.nodes.iter().all(|n| n.differences.iter().all(|d| *d == 0.0)));
    }

    #[test]
    fn zero_problem_passes() {
        let spec = ProblemSpec::<f64>::zeros(1, 1, 1, 2);
        let tables = recursions::feedback_backward(&spec, 0, &tol()).unwrap();
        let policy = build_policy(&tables);
        let tree = NoiseTree::build(&spec, &policy, &dvector![1.0], 12).unwrap();
        let rep = check_definition_inequality(&spec, &policy, &tree, &[0, 1], &default_grid(), &tol()).unwrap();
        assert!(rep.pass && rep.worst_margin == 0.0);
    }
}
