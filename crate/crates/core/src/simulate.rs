//! Noise sampling, closed-loop simulation, exact moment propagation and the
//! two-point noise tree used as an exact oracle for conditional costs.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::EquilibriumPolicy;
use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::scalar::{Mat, Scalar, Vector};

/// Largest tree depth accepted by [`NoiseTree::build`] unless the caller raises it.
pub const DEFAULT_DEPTH_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    TwoPoint,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "two-point" | "two_point" => Ok(NoiseKind::TwoPoint),
            _ => Err(Error::Schema(format!("unknown noise model \"{s}\""))),
        }
    }
}

/// Martingale-difference noise with `E[w_k w_kᵀ] = Δ_k`.
#[derive(Debug, Clone)]
pub struct NoiseModel<T: Scalar> {
    pub kind: NoiseKind,
    pub delta: Vec<Mat<T>>,
    /// Symmetric square roots of `Δ_k`.
    roots: Vec<Mat<T>>,
}

fn sym_sqrt<T: Scalar>(m: &Mat<T>) -> Result<Mat<T>> {
    let eig =
        SymmetricEigen::try_new(m.clone(), T::default_epsilon(), 0).ok_or(Error::Decomposition("symmetric eigen"))?;
    let d = eig.eigenvalues.map(|l| l.max(T::zero()).sqrt());
    Ok(&eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose())
}

impl<T: Scalar> NoiseModel<T> {
    pub fn new(spec: &ProblemSpec<T>, kind: NoiseKind) -> Result<Self> {
        if kind == NoiseKind::TwoPoint && spec.p != 1 {
            return Err(Error::Unsupported(format!(
                "two-point noise needs a single channel, problem has p = {}",
                spec.p
            )));
        }
        let delta: Vec<_> = (0..spec.horizon).map(|k| spec.delta(k).clone()).collect();
        let roots = delta.iter().map(sym_sqrt).collect::<Result<_>>()?;
        Ok(Self { kind, delta, roots })
    }

    /// Draws `w_k`.
    pub fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vector<T> {
        let p = self.delta[k].nrows();
        match self.kind {
            NoiseKind::Gaussian => {
                let z = Vector::from_fn(p, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
                &self.roots[k] * z
            }
            NoiseKind::TwoPoint => {
                let s = self.roots[k][(0, 0)];
                Vector::from_element(1, if rng.gen::<bool>() { s } else { -s })
            }
        }
    }
}

/// One simulated closed-loop path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub t: usize,
    pub rep: usize,
    pub seed: u64,
    /// `X_t ..= X_N`
    pub states: Vec<Vector<T>>,
    /// `u_t .. u_{N-1}`
    pub controls: Vec<Vector<T>>,
    /// `w_t .. w_{N-1}`
    pub noise: Vec<Vector<T>>,
    /// Pathwise cost whose expectation is `J(t, x; u)`.
    pub cost: T,
}

/// Per-replicate RNG: one ChaCha stream per replicate under a shared seed.
pub fn replicate_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

fn check_start<T: Scalar>(spec: &ProblemSpec<T>, policy: &EquilibriumPolicy<T>, x: &Vector<T>) -> Result<()> {
    if policy.horizon != spec.horizon || policy.n != spec.n || policy.m != spec.m {
        return Err(Error::Dimension {
            context: "policy".into(),
            expected: format!("N={} n={} m={}", spec.horizon, spec.n, spec.m),
            got: format!("N={} n={} m={}", policy.horizon, policy.n, policy.m),
        });
    }
    if x.len() != spec.n {
        return Err(Error::Dimension {
            context: "initial state".into(),
            expected: format!("{}", spec.n),
            got: format!("{}", x.len()),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    Ok(())
}

/// One closed-loop step of the equilibrium state under the `(k, k)` system.
pub fn closed_loop_step<T: Scalar>(
    spec: &ProblemSpec<T>,
    k: usize,
    x: &Vector<T>,
    u: &Vector<T>,
    w: &Vector<T>,
) -> Vector<T> {
    let st = spec.stage(k, k);
    let cc = spec.composites_of(k, st);
    let mut next = &cc.a * x + &cc.b * u + &st.drift;
    for i in 0..spec.p {
        next += (&cc.c[i] * x + &cc.d[i] * u + &st.diffusion[i]) * w[i];
    }
    next
}

/// Simulates `reps` independent closed-loop paths from `(policy.t, x)`.
///
/// Each replicate also carries a pathwise cost: the state process of the
/// problem posed at `t` is driven by the same noise, with its mean-field
/// terms replaced by the exact means from [`moment_propagation`].
pub fn simulate_closed_loop<T: Scalar>(
    spec: &ProblemSpec<T>,
    policy: &EquilibriumPolicy<T>,
    x: &Vector<T>,
    model: &NoiseModel<T>,
    reps: usize,
    seed: u64,
) -> Result<Vec<Trajectory<T>>> {
    check_start(spec, policy, x)?;
    let moments = moment_propagation(spec, policy, x)?;
    let t = policy.t;
    let out = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(seed, rep);
            let mut states = vec![x.clone()];
            let mut controls = Vec::with_capacity(spec.horizon - t);
            let mut noise = Vec::with_capacity(spec.horizon - t);
            let mut xs = x.clone();
            let mut cost = T::zero();
            for k in t..spec.horizon {
                let xstar = states.last().unwrap().clone();
                let u = policy.control(k, &xstar);
                let w = model.draw(k, &mut rng);

                let st = spec.stage(t, k);
                let mu = &moments.mean_x[k - t];
                let us = policy.rule_control(k, &xs, &xstar);
                let ubar = policy.rule_control(k, mu, &moments.mean_star[k - t]);
                cost += xs.dot(&(&st.q * &xs))
                    + mu.dot(&(&st.q_bar * mu))
                    + us.dot(&(&st.r * &us))
                    + ubar.dot(&(&st.r_bar * &ubar))
                    + T::lit(2.0) * (st.lin_state.dot(&xs) + st.lin_control.dot(&us));
                let mut nx = &st.a * &xs + &st.a_bar * mu + &st.b * &us + &st.b_bar * &ubar + &st.drift;
                for i in 0..spec.p {
                    nx +=
                        (&st.c[i] * &xs + &st.c_bar[i] * mu + &st.d[i] * &us + &st.d_bar[i] * &ubar + &st.diffusion[i])
                            * w[i];
                }
                xs = nx;

                states.push(closed_loop_step(spec, k, &xstar, &u, &w));
                controls.push(u);
                noise.push(w);
            }
            let tm = spec.terminal(t);
            let mu = moments.mean_x.last().unwrap();
            cost += xs.dot(&(&tm.weight * &xs))
                + mu.dot(&(&tm.weight_bar * mu))
                + T::lit(2.0) * (&tm.coupling * x + &tm.linear).dot(&xs);
            Trajectory {
                t,
                rep,
                seed,
                states,
                controls,
                noise,
                cost,
            }
        })
        .collect();
    Ok(out)
}

// Adding 0.0 prints -0.0 as 0.
fn fmt_cell(v: f64) -> String {
    format!("{}", v + 0.0)
}

/// CSV with header `stage,x1..xn,u1..um,w1..wp`; the long format prepends a `rep` column.
pub fn trajectories_to_csv<T: Scalar>(trajs: &[Trajectory<T>], long: bool) -> String {
    let Some(first) = trajs.first() else {
        return String::new();
    };
    let n = first.states[0].len();
    let m = first.controls.first().map_or(0, |u| u.len());
    let p = first.noise.first().map_or(0, |w| w.len());
    let mut head: Vec<String> = Vec::new();
    if long {
        head.push("rep".into());
    }
    head.push("stage".into());
    head.extend((1..=n).map(|i| format!("x{i}")));
    head.extend((1..=m).map(|i| format!("u{i}")));
    head.extend((1..=p).map(|i| format!("w{i}")));
    let mut out = head.join(",");
    out.push('\n');
    for tr in trajs {
        for (j, x) in tr.states.iter().enumerate() {
            let mut cells: Vec<String> = Vec::new();
            if long {
                cells.push(tr.rep.to_string());
            }
            cells.push((tr.t + j).to_string());
            cells.extend(x.iter().map(|v| fmt_cell(v.as_f64())));
            // The terminal row has no control or noise.
            match (tr.controls.get(j), tr.noise.get(j)) {
                (Some(u), Some(w)) => {
                    cells.extend(u.iter().map(|v| fmt_cell(v.as_f64())));
                    cells.extend(w.iter().map(|v| fmt_cell(v.as_f64())));
                }
                _ => cells.extend(std::iter::repeat(String::new()).take(m + p)),
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

/// Exact first and second moments of the closed-loop state, and the exact cost.
#[derive(Debug, Clone)]
pub struct Moments<T: Scalar> {
    /// `E X*_k`, k = t..=N
    pub mean_star: Vec<Vector<T>>,
    /// `E[X*_k X*_kᵀ]`
    pub second_star: Vec<Mat<T>>,
    /// Mean of the state process of the problem posed at `t`.
    pub mean_x: Vec<Vector<T>>,
    /// `J(t, x; u)` for the policy's control rule.
    pub cost: T,
}

fn blocks<T: Scalar>(top: (&Mat<T>, &Mat<T>), bottom: (&Mat<T>, &Mat<T>)) -> Mat<T> {
    let n = top.0.nrows();
    let mut out = Mat::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(top.0);
    out.view_mut((0, n), (n, n)).copy_from(top.1);
    out.view_mut((n, 0), (n, n)).copy_from(bottom.0);
    out.view_mut((n, n), (n, n)).copy_from(bottom.1);
    out
}

fn stack<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Vector<T> {
    let n = a.len();
    Vector::from_fn(2 * n, |i, _| if i < n { a[i] } else { b[i - n] })
}

/// Propagates the joint process `(X, X*)`: `X` is the state of the problem
/// posed at `t` under `u = Φ X + Γ X* + c`, `X*` the equilibrium state.
pub fn moment_propagation<T: Scalar>(
    spec: &ProblemSpec<T>,
    policy: &EquilibriumPolicy<T>,
    x: &Vector<T>,
) -> Result<Moments<T>> {
    check_start(spec, policy, x)?;
    let (n, t) = (spec.n, policy.t);
    let zn = Mat::<T>::zeros(n, n);
    let two = T::lit(2.0);
    let mut mu = stack(x, x);
    let mut p2 = &mu * mu.transpose();
    let mut out = Moments {
        mean_star: Vec::new(),
        second_star: Vec::new(),
        mean_x: Vec::new(),
        cost: T::zero(),
    };
    for k in t..spec.horizon {
        let st = spec.stage(t, k);
        let dst = spec.stage(k, k);
        let dc = spec.composites_of(k, dst);
        let phi = policy.phi(k);
        let gamma = policy.gamma(k);
        let c = policy.offset(k);
        let kg = phi + gamma;
        record(&mut out, &mu, &p2, n);

        // u = L Z + c
        let mut lz = Mat::zeros(spec.m, 2 * n);
        lz.view_mut((0, 0), (spec.m, n)).copy_from(phi);
        lz.view_mut((0, n), (spec.m, n)).copy_from(gamma);
        let mux = mu.rows(0, n).into_owned();
        let ubar = &lz * &mu + c;
        let pxx = p2.view((0, 0), (n, n)).into_owned();
        out.cost += (&st.q * &pxx).trace()
            + mux.dot(&(&st.q_bar * &mux))
            + (lz.transpose() * &st.r * &lz * &p2).trace()
            + two * c.dot(&(&st.r * &lz * &mu))
            + c.dot(&(&st.r * c))
            + ubar.dot(&(&st.r_bar * &ubar))
            + two * (st.lin_state.dot(&mux) + st.lin_control.dot(&ubar));

        let mm = blocks(
            (&(&st.a + &st.b * phi), &(&st.b * gamma)),
            (&zn, &(&dc.a + &dc.b * &kg)),
        );
        let nm = blocks((&(&st.a_bar + &st.b_bar * phi), &(&st.b_bar * gamma)), (&zn, &zn));
        let a = stack(&(&st.drift + (&st.b + &st.b_bar) * c), &(&dst.drift + &dc.b * c));
        let b = &nm * &mu + a;
        let mut noise_terms = Vec::with_capacity(spec.p);
        for i in 0..spec.p {
            let mi = blocks(
                (&(&st.c[i] + &st.d[i] * phi), &(&st.d[i] * gamma)),
                (&zn, &(&dc.c[i] + &dc.d[i] * &kg)),
            );
            let ni = blocks(
                (&(&st.c_bar[i] + &st.d_bar[i] * phi), &(&st.d_bar[i] * gamma)),
                (&zn, &zn),
            );
            let ai = stack(
                &(&st.diffusion[i] + (&st.d[i] + &st.d_bar[i]) * c),
                &(&dst.diffusion[i] + &dc.d[i] * c),
            );
            noise_terms.push((ni * &mu + ai, mi));
        }
        let delta = spec.delta(k);
        let mut next_p = &mm * &p2 * mm.transpose()
            + &mm * &mu * b.transpose()
            + &b * mu.transpose() * mm.transpose()
            + &b * b.transpose();
        for (i, (bi, mi)) in noise_terms.iter().enumerate() {
            for (j, (bj, mj)) in noise_terms.iter().enumerate() {
                let w = delta[(i, j)];
                if w == T::zero() {
                    continue;
                }
                next_p += (mi * &p2 * mj.transpose()
                    + mi * &mu * bj.transpose()
                    + bi * mu.transpose() * mj.transpose()
                    + bi * bj.transpose())
                    * w;
            }
        }
        mu = (&mm + &nm) * &mu + stack(&(&st.drift + (&st.b + &st.b_bar) * c), &(&dst.drift + &dc.b * c));
        p2 = (&next_p + next_p.transpose()) * T::lit(0.5);
    }
    record(&mut out, &mu, &p2, n);
    let tm = spec.terminal(t);
    let mux = mu.rows(0, n).into_owned();
    let pxx = p2.view((0, 0), (n, n)).into_owned();
    out.cost += (&tm.weight * &pxx).trace()
        + mux.dot(&(&tm.weight_bar * &mux))
        + two * (&tm.coupling * x + &tm.linear).dot(&mux);
    if !out.cost.is_finite() {
        return Err(Error::NonFinite("propagated cost".into()));
    }
    Ok(out)
}

fn record<T: Scalar>(out: &mut Moments<T>, mu: &Vector<T>, p2: &Mat<T>, n: usize) {
    out.mean_x.push(mu.rows(0, n).into_owned());
    out.mean_star.push(mu.rows(n, n).into_owned());
    out.second_star.push(p2.view((n, n), (n, n)).into_owned());
}

/// Complete binary lattice of two-point noise paths from `(t, x)`, carrying the
/// equilibrium state at every node. Node `j` at depth `d` has children `2j`
/// (noise `-√δ`) and `2j + 1` (noise `+√δ`), each with conditional probability ½.
#[derive(Debug, Clone)]
pub struct NoiseTree<T: Scalar> {
    pub t: usize,
    pub horizon: usize,
    /// `√δ_k`, k = t..N
    pub amplitude: Vec<T>,
    /// `states[d][j]` is `X*` at stage `t + d`.
    pub states: Vec<Vec<Vector<T>>>,
}

impl<T: Scalar> NoiseTree<T> {
    /// Builds the tree along the closed loop of `policy` started at `(policy.t, x)`.
    pub fn build(
        spec: &ProblemSpec<T>,
        policy: &EquilibriumPolicy<T>,
        x: &Vector<T>,
        depth_limit: usize,
    ) -> Result<Self> {
        check_start(spec, policy, x)?;
        let t = policy.t;
        let depth = spec.horizon - t;
        if depth > depth_limit {
            return Err(Error::DepthExceeded {
                depth,
                limit: depth_limit,
            });
        }
        if spec.p != 1 {
            return Err(Error::Unsupported(format!(
                "the noise tree needs a single channel, problem has p = {}",
                spec.p
            )));
        }
        let amplitude: Vec<T> = (t..spec.horizon)
            .map(|k| spec.delta(k)[(0, 0)].max(T::zero()).sqrt())
            .collect();
        let mut states = vec![vec![x.clone()]];
        for k in t..spec.horizon {
            let s = amplitude[k - t];
            let level = states.last().unwrap();
            let mut next = Vec::with_capacity(level.len() * 2);
            for xs in level {
                let u = policy.control(k, xs);
                for w in [-s, s] {
                    next.push(closed_loop_step(spec, k, xs, &u, &Vector::from_element(1, w)));
                }
            }
            states.push(next);
        }
        Ok(Self {
            t,
            horizon: spec.horizon,
            amplitude,
            states,
        })
    }

    pub fn depth(&self) -> usize {
        self.horizon - self.t
    }

    /// Number of nodes at stage `k`.
    pub fn width(&self, k: usize) -> usize {
        1 << (k - self.t)
    }

    pub fn state(&self, k: usize, node: usize) -> &Vector<T> {
        &self.states[k - self.t][node]
    }

    /// Probability of reaching a node at stage `k` from the root.
    pub fn node_probability(&self, k: usize) -> T {
        T::one() / T::lit(self.width(k) as f64)
    }

    /// Noise realized on the edge into `node` at stage `k >= t + 1`.
    pub fn edge_noise(&self, k: usize, node: usize) -> T {
        let s = self.amplitude[k - 1 - self.t];
        if node % 2 == 0 {
            -s
        } else {
            s
        }
    }

    /// `E_k[X*_l]` at a stage-`k` node, by averaging its stage-`l` descendants.
    pub fn conditional_mean(&self, k: usize, node: usize, l: usize) -> Vector<T> {
        let span = 1usize << (l - k);
        let level = &self.states[l - self.t];
        let mut acc = Vector::zeros(level[0].len());
        for j in node * span..(node + 1) * span {
            acc += &level[j];
        }
        acc / T::lit(span as f64)
    }
}

/// A control rule on the tree: `u_l = Φ_l X_l + v_l(node)`, with `X` the state
/// of the subproblem being evaluated and `v` an arbitrary per-node offset.
#[derive(Debug, Clone)]
pub struct NodeRule<T: Scalar> {
    pub t: usize,
    /// `phi[k - t]`
    pub phi: Vec<Mat<T>>,
    /// `offsets[k - t][node]`
    pub offsets: Vec<Vec<Vector<T>>>,
}

impl<T: Scalar> NodeRule<T> {
    /// The rule induced by a policy along its own tree: `v_l = Γ_l X*_l + c_l`.
    pub fn from_policy(policy: &EquilibriumPolicy<T>, tree: &NoiseTree<T>) -> Self {
        let t = tree.t;
        let phi = (t..tree.horizon).map(|k| policy.phi(k).clone()).collect();
        let offsets = (t..tree.horizon)
            .map(|k| tree.states[k - t].iter().map(|xs| policy.open_part(k, xs)).collect())
            .collect();
        Self { t, phi, offsets }
    }

    pub fn offset_mut(&mut self, k: usize, node: usize) -> &mut Vector<T> {
        &mut self.offsets[k - self.t][node]
    }
}

/// Exact conditional cost `J(k, X*_k(node); u)` of the subproblem posed at the
/// stage-`k` node, with every `E_k` computed by averaging over the subtree.
pub fn tree_cost<T: Scalar>(
    spec: &ProblemSpec<T>,
    tree: &NoiseTree<T>,
    k: usize,
    node: usize,
    rule: &NodeRule<T>,
) -> Result<T> {
    if k < tree.t || k >= tree.horizon || node >= tree.width(k) {
        return Err(Error::Index(format!("node ({k}, {node}) not in the tree")));
    }
    if rule.t != tree.t || rule.offsets.len() != tree.depth() || rule.phi.len() != tree.depth() {
        return Err(Error::Index("control rule does not cover the tree".into()));
    }
    for l in k..tree.horizon {
        if rule.offsets[l - tree.t].len() != tree.width(l) {
            return Err(Error::Index(format!("control rule incomplete at stage {l}")));
        }
    }
    let two = T::lit(2.0);
    let x0 = tree.state(k, node).clone();
    let mut level = vec![x0.clone()];
    let mut cost = T::zero();
    for l in k..tree.horizon {
        let st = spec.stage(k, l);
        let span = level.len();
        let first = node * span;
        let inv = T::one() / T::lit(span as f64);
        let controls: Vec<Vector<T>> = level
            .iter()
            .enumerate()
            .map(|(i, xs)| &rule.phi[l - tree.t] * xs + &rule.offsets[l - tree.t][first + i])
            .collect();
        let mu = level.iter().fold(Vector::zeros(spec.n), |a, b| a + b) * inv;
        let ubar = controls.iter().fold(Vector::zeros(spec.m), |a, b| a + b) * inv;
        let mut quad = T::zero();
        for (xs, u) in level.iter().zip(&controls) {
            quad += xs.dot(&(&st.q * xs)) + u.dot(&(&st.r * u));
        }
        cost += quad * inv
            + mu.dot(&(&st.q_bar * &mu))
            + ubar.dot(&(&st.r_bar * &ubar))
            + two * (st.lin_state.dot(&mu) + st.lin_control.dot(&ubar));
        let s = tree.amplitude[l - tree.t];
        let drift_mean = &st.a_bar * &mu + &st.b_bar * &ubar + &st.drift;
        let diff_mean = &st.c_bar[0] * &mu + &st.d_bar[0] * &ubar + &st.diffusion[0];
        let mut next = Vec::with_capacity(span * 2);
        for (xs, u) in level.iter().zip(&controls) {
            let base = &st.a * xs + &st.b * u + &drift_mean;
            let vol = &st.c[0] * xs + &st.d[0] * u + &diff_mean;
            next.push(&base - &vol * s);
            next.push(&base + &vol * s);
        }
        level = next;
    }
    let tm = spec.terminal(k);
    let inv = T::one() / T::lit(level.len() as f64);
    let mu = level.iter().fold(Vector::zeros(spec.n), |a, b| a + b) * inv;
    let mut quad = T::zero();
    for xs in &level {
        quad += xs.dot(&(&tm.weight * xs));
    }
    cost += quad * inv + mu.dot(&(&tm.weight_bar * &mu)) + two * (&tm.coupling * &x0 + &tm.linear).dot(&mu);
    Ok(cost)
}

/// Sample mean and standard error per coordinate of the closed-loop state at each stage.
pub fn sample_mean_and_se<T: Scalar>(trajs: &[Trajectory<T>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let Some(first) = trajs.first() else {
        return (vec![], vec![]);
    };
    let stages = first.states.len();
    let n = first.states[0].len();
    let r = trajs.len() as f64;
    let mut means = vec![vec![0.0; n]; stages];
    let mut ses = vec![vec![0.0; n]; stages];
    for s in 0..stages {
        for i in 0..n {
            let vals = trajs.iter().map(|tr| tr.states[s][i].as_f64());
            let mean = vals.clone().sum::<f64>() / r;
            let var = if trajs.len() > 1 {
                vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                0.0
            };
            means[s][i] = mean;
            ses[s][i] = (var / r).sqrt();
        }
    }
    (means, ses)
}

/// Sample covariance of the closed-loop state at each stage.
pub fn sample_covariance<T: Scalar>(trajs: &[Trajectory<T>]) -> Vec<Mat<f64>> {
    let Some(first) = trajs.first() else { return vec![] };
    let n = first.states[0].len();
    let r = trajs.len() as f64;
    (0..first.states.len())
        .map(|s| {
            let xs: Vec<Vector<f64>> = trajs.iter().map(|tr| tr.states[s].map(|v| v.as_f64())).collect();
            let mean = xs.iter().fold(Vector::zeros(n), |a, b| a + b) / r;
            let mut cov = Mat::zeros(n, n);
            for x in &xs {
                let d = x - &mean;
                cov += &d * d.transpose();
            }
            if trajs.len() > 1 {
                cov / (r - 1.0)
            } else {
                cov
            }
        })
        .collect()
}
