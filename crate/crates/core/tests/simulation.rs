use mixeq::equilibrium::{build_policy, stationarity_residual, EquilibriumPolicy};
use mixeq::model::{builtin_example, random_spec, ProblemSpec, RandomSpecOptions};
use mixeq::recursions::{feedback_backward, mixed_backward, open_loop_backward, SolverKind};
use mixeq::reference;
use mixeq::simulate::{
    moment_propagation, replicate_rng, sample_mean_and_se, simulate_closed_loop, trajectories_to_csv, tree_cost,
    NodeRule, NoiseKind, NoiseModel, NoiseTree,
};
use mixeq::{Mat, Tolerances, Vector};
use nalgebra::{dmatrix, dvector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tol() -> Tolerances {
    Tolerances::default()
}

fn last_psi_policy() -> (ProblemSpec<f64>, EquilibriumPolicy<f64>, mixeq::Tables) {
    let spec = builtin_example();
    let tables = mixed_backward(&spec, &reference::psi(9), 0, &tol()).unwrap();
    let policy = build_policy(&tables);
    (spec, policy, tables)
}

fn zero_policy(spec: &ProblemSpec<f64>, t: usize) -> EquilibriumPolicy<f64> {
    let s = spec.horizon - t;
    EquilibriumPolicy {
        kind: SolverKind::Mixed,
        t,
        horizon: spec.horizon,
        n: spec.n,
        m: spec.m,
        phis: vec![Mat::zeros(spec.m, spec.n); s],
        gammas: vec![Mat::zeros(spec.m, spec.n); s],
        offsets: vec![Vector::zeros(spec.m); s],
    }
}

#[test]
fn zero_problem_collapses() {
    let spec = ProblemSpec::<f64>::zeros(2, 1, 1, 3);
    let policy = build_policy(&feedback_backward(&spec, 0, &tol()).unwrap());
    let model = NoiseModel::new(&spec, NoiseKind::Gaussian).unwrap();
    let trajs = simulate_closed_loop(&spec, &policy, &dvector![1.0, -2.0], &model, 5, 3).unwrap();
    for tr in &trajs {
        assert!(tr.states[1..].iter().all(|x| x.amax() == 0.0));
    }
}

#[test]
fn terminal_weight_hand_cases() {
    let mut spec = ProblemSpec::<f64>::zeros(2, 1, 1, 1);
    spec.terminal_mut(0).weight = Mat::identity(2, 2);
    let policy = zero_policy(&spec, 0);
    let x = dvector![1.0, 0.0];
    assert_eq!(moment_propagation(&spec, &policy, &x).unwrap().cost, 0.0);
    spec.stage_mut(0, 0).a = Mat::identity(2, 2);
    assert!((moment_propagation(&spec, &policy, &x).unwrap().cost - 1.0).abs() < 1e-15);
}

/// Without noise the closed loop is a single path; its cost is a plain sum.
#[test]
fn deterministic_problem_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut opts = RandomSpecOptions::new(2, 2, 1, 4);
    opts.mean_field = true;
    let mut spec = random_spec(&mut rng, &opts);
    spec.for_each_stage(|_, _, st| {
        st.c[0].fill(0.0);
        st.c_bar[0].fill(0.0);
        st.d[0].fill(0.0);
        st.d_bar[0].fill(0.0);
        st.diffusion[0].fill(0.0);
    });
    let t = 1;
    let policy = build_policy(&open_loop_backward(&spec, t, &tol()).unwrap());
    let x = dvector![0.4, -1.1];
    let model = NoiseModel::new(&spec, NoiseKind::Gaussian).unwrap();
    let a = simulate_closed_loop(&spec, &policy, &x, &model, 2, 1).unwrap();
    let b = simulate_closed_loop(&spec, &policy, &x, &model, 1, 999).unwrap();
    assert_eq!(a[0].states, a[1].states);
    assert_eq!(a[0].states, b[0].states);

    // The subproblem posed at t sees the same path (X = X* here since both start at x).
    let mut xs = x.clone();
    let mut xstar = x.clone();
    let mut cost = 0.0;
    for k in t..spec.horizon {
        let st = spec.stage(t, k);
        let u = policy.phi(k) * &xs + policy.gamma(k) * &xstar + policy.offset(k);
        cost += (xs.transpose() * (&st.q + &st.q_bar) * &xs)[0]
            + (u.transpose() * (&st.r + &st.r_bar) * &u)[0]
            + 2.0 * (st.lin_state.dot(&xs) + st.lin_control.dot(&u));
        let d = spec.stage(k, k);
        let us = policy.gain(k) * &xstar + policy.offset(k);
        xstar = (&d.a + &d.a_bar) * &xstar + (&d.b + &d.b_bar) * &us + &d.drift;
        xs = (&st.a + &st.a_bar) * &xs + (&st.b + &st.b_bar) * &u + &st.drift;
    }
    let tm = spec.terminal(t);
    cost += (xs.transpose() * (&tm.weight + &tm.weight_bar) * &xs)[0] + 2.0 * (&tm.coupling * &x + &tm.linear).dot(&xs);
    let exact = moment_propagation(&spec, &policy, &x).unwrap();
    assert!(
        (exact.cost - cost).abs() <= 1e-10 * cost.abs().max(1.0),
        "{} vs {cost}",
        exact.cost
    );
    assert!((exact.cost - a[0].cost).abs() <= 1e-10 * cost.abs().max(1.0));
    for (j, s) in a[0].states.iter().enumerate() {
        assert!((s - &exact.mean_star[j]).amax() < 1e-12);
    }
}

#[test]
fn sample_mean_within_three_standard_errors() {
    let (spec, policy, _) = last_psi_policy();
    let x = dvector![1.0, 1.0];
    let model = NoiseModel::new(&spec, NoiseKind::Gaussian).unwrap();
    let trajs = simulate_closed_loop(&spec, &policy, &x, &model, 10_000, 2024).unwrap();
    let exact = moment_propagation(&spec, &policy, &x).unwrap();
    let (means, ses) = sample_mean_and_se(&trajs);
    for k in 1..=spec.horizon {
        for i in 0..2 {
            let z = (means[k][i] - exact.mean_star[k][i]).abs() / ses[k][i];
            assert!(z <= 3.0, "stage {k} coord {i}: z = {z}");
        }
    }
    // The pathwise cost is unbiased for the exact cost.
    let costs: Vec<f64> = trajs.iter().map(|t| t.cost).collect();
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (costs.len() - 1) as f64;
    let se = (var / costs.len() as f64).sqrt();
    assert!(
        (mean - exact.cost).abs() <= 4.0 * se,
        "{mean} vs {} (se {se})",
        exact.cost
    );
}

#[test]
fn gaussian_draws_match_second_moments() {
    let mut spec = ProblemSpec::<f64>::zeros(1, 1, 2, 1);
    let delta = dmatrix![2.0, 0.6; 0.6, 0.5];
    spec.set_delta(0, delta.clone());
    let model = NoiseModel::new(&spec, NoiseKind::Gaussian).unwrap();
    let mut rng = replicate_rng(5, 0);
    let n = 100_000;
    let draws: Vec<Vector<f64>> = (0..n).map(|_| model.draw(0, &mut rng)).collect();
    let nf = n as f64;
    for i in 0..2 {
        let mean = draws.iter().map(|w| w[i]).sum::<f64>() / nf;
        assert!(mean.abs() <= 4.0 * (delta[(i, i)] / nf).sqrt());
        for j in 0..2 {
            let prod: Vec<f64> = draws.iter().map(|w| w[i] * w[j]).collect();
            let m = prod.iter().sum::<f64>() / nf;
            let v = prod.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (nf - 1.0);
            assert!((m - delta[(i, j)]).abs() <= 4.0 * (v / nf).sqrt(), "({i},{j}) {m}");
        }
    }
}

#[test]
fn two_point_needs_single_channel() {
    let spec = ProblemSpec::<f64>::zeros(1, 1, 2, 1);
    assert!(NoiseModel::new(&spec, NoiseKind::TwoPoint).is_err());
}

#[test]
fn tree_cost_equals_propagated_cost() {
    let (spec, policy, _) = last_psi_policy();
    let x = dvector![1.0, 1.0];
    let tree = NoiseTree::build(&spec, &policy, &x, 12).unwrap();
    let rule = NodeRule::from_policy(&policy, &tree);
    let j_tree = tree_cost(&spec, &tree, 0, 0, &rule).unwrap();
    let j_mom = moment_propagation(&spec, &policy, &x).unwrap().cost;
    assert!(
        (j_tree - j_mom).abs() <= 1e-10 * j_mom.abs().max(1.0),
        "{j_tree} vs {j_mom}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (i, start) in [0usize, 1, 2].into_iter().enumerate() {
        let spec = random_spec(&mut rng, &RandomSpecOptions::new(2, 2, 1, 4));
        let tables = match i {
            0 => open_loop_backward(&spec, start, &tol()).unwrap(),
            1 => feedback_backward(&spec, start, &tol()).unwrap(),
            _ => {
                let phi: Vec<Mat<f64>> = (0..4).map(|k| dmatrix![0.1 * k as f64, -0.2; 0.3, 0.05]).collect();
                mixed_backward(&spec, &phi, start, &tol()).unwrap()
            }
        };
        let policy = build_policy(&tables);
        let x = dvector![0.7, -0.3];
        let tree = NoiseTree::build(&spec, &policy, &x, 12).unwrap();
        let rule = NodeRule::from_policy(&policy, &tree);
        let j_tree = tree_cost(&spec, &tree, start, 0, &rule).unwrap();
        let j_mom = moment_propagation(&spec, &policy, &x).unwrap().cost;
        assert!(
            (j_tree - j_mom).abs() <= 1e-10 * j_mom.abs().max(1.0),
            "{j_tree} vs {j_mom}"
        );
    }
}

#[test]
fn tree_structure() {
    let (spec, policy, _) = last_psi_policy();
    let mut short = policy.clone();
    short.t = 2;
    short.phis.drain(..2);
    short.gammas.drain(..2);
    short.offsets.drain(..2);
    let tree = NoiseTree::build(&spec, &short, &dvector![1.0, 1.0], 12).unwrap();
    assert_eq!(tree.states[2].len(), 4);
    assert_eq!(tree.node_probability(4), 0.25);

    let tree = NoiseTree::build(&spec, &policy, &dvector![1.0, 1.0], 12).unwrap();
    assert_eq!(tree.states[4].len(), 16);
    // Tower property: averaging the children's conditional means recovers the parent's.
    for k in 0..4 {
        for node in 0..tree.width(k) {
            for l in k + 1..=4 {
                let parent = tree.conditional_mean(k, node, l);
                let kids =
                    (tree.conditional_mean(k + 1, 2 * node, l) + tree.conditional_mean(k + 1, 2 * node + 1, l)) * 0.5;
                assert!((parent - kids).amax() <= 1e-12);
            }
        }
    }
    let m = tree.conditional_mean(2, 1, 4);
    let direct = (4..8).fold(Vector::zeros(2), |a, j| a + tree.state(4, j)) / 4.0;
    assert!((m - direct).amax() < 1e-14);
    assert!(matches!(
        NoiseTree::build(&spec, &policy, &dvector![1.0, 1.0], 3),
        Err(mixeq::Error::DepthExceeded { .. })
    ));
}

#[test]
fn degenerate_noise_duplicates_branches() {
    let mut spec = builtin_example();
    spec.set_delta(1, dmatrix![0.0]);
    let policy = build_policy(&mixed_backward(&spec, &reference::psi(0), 0, &tol()).unwrap());
    let tree = NoiseTree::build(&spec, &policy, &dvector![1.0, -1.0], 12).unwrap();
    for j in 0..2 {
        assert_eq!(tree.state(2, 2 * j), tree.state(2, 2 * j + 1));
    }
}

#[test]
fn trajectories_satisfy_the_closed_loop_recursion() {
    let (spec, policy, tables) = last_psi_policy();
    let model = NoiseModel::new(&spec, NoiseKind::Gaussian).unwrap();
    let trajs = simulate_closed_loop(&spec, &policy, &dvector![1.0, 1.0], &model, 20, 8).unwrap();
    for tr in &trajs {
        for k in 0..4 {
            let st = spec.stage(k, k);
            let (x, u, w) = (&tr.states[k], &tr.controls[k], tr.noise[k][0]);
            let next = (&st.a + &st.a_bar) * x + (&st.b + &st.b_bar) * u + (&st.d[0] + &st.d_bar[0]) * u * w;
            assert!((&tr.states[k + 1] - next).amax() <= 1e-12);
            assert!(stationarity_residual(&policy, &tables, x, k).norm() <= 1e-10);
        }
    }
}

#[test]
fn seeds_are_reproducible_per_replicate() {
    let (spec, policy, _) = last_psi_policy();
    let x = dvector![1.0, 1.0];
    let model = NoiseModel::new(&spec, NoiseKind::TwoPoint).unwrap();
    let a = simulate_closed_loop(&spec, &policy, &x, &model, 8, 42).unwrap();
    let b = simulate_closed_loop(&spec, &policy, &x, &model, 3, 42).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
    }
    assert_eq!(trajectories_to_csv(&a, true), trajectories_to_csv(&a, true));
    let c = simulate_closed_loop(&spec, &policy, &x, &model, 8, 43).unwrap();
    assert_ne!(a, c);
}

#[test]
fn csv_layout() {
    let (spec, policy, _) = last_psi_policy();
    let model = NoiseModel::new(&spec, NoiseKind::Gaussian).unwrap();
    let trajs = simulate_closed_loop(&spec, &policy, &dvector![1.0, 1.0], &model, 2, 1).unwrap();
    let long = trajectories_to_csv(&trajs, true);
    let lines: Vec<&str> = long.lines().collect();
    assert_eq!(lines[0], "rep,stage,x1,x2,u1,w1");
    assert_eq!(lines.len(), 1 + 2 * 5);
    assert!(lines[5].starts_with("0,4,") && lines[5].ends_with(",,"));
    let single = trajectories_to_csv(&trajs[..1], false);
    assert!(single.starts_with("stage,x1,x2,u1,w1\n0,1,1,"));
}
