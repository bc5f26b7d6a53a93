use mixeq::equilibrium::{
    assumption_h_check, build_policy, classify_existence, uniqueness_check, PolicyLabel, SamplingOptions, Scope,
    Verdict,
};
use mixeq::linalg::min_eig_sym;
use mixeq::model::{builtin_example, random_spec, ProblemSpec, RandomSpecOptions};
use mixeq::recursions::{feedback_backward, full_phi, mixed_backward, open_loop_backward};
use mixeq::reference;
use mixeq::{Mat, Tolerances};
use nalgebra::dmatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tol() -> Tolerances {
    Tolerances::default()
}

fn weighted_spec(seed: u64, i: usize) -> ProblemSpec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opts = RandomSpecOptions::new(1 + i % 3, 1 + (i / 3) % 3, 1 + i % 2, 1 + i % 5);
    opts.nonnegative_weights = true;
    random_spec(&mut rng, &opts)
}

#[test]
fn weight_conditions_give_positive_feedback_operators() {
    for i in 0..100 {
        let spec = weighted_spec(1000 + i as u64, i);
        assert!(assumption_h_check(&spec, &tol()).unwrap().holds);
        let fb = feedback_backward(&spec, 0, &tol()).unwrap();
        for op in &fb.ops {
            let sym = (&op.oo + op.oo.transpose()) * 0.5;
            assert!(min_eig_sym(&sym).unwrap() > 0.0);
        }
        let u = uniqueness_check(&spec, 0, &tol()).unwrap();
        assert_eq!(u.feedback_unique, Verdict::Yes, "spec {i}");
    }
}

#[test]
fn example_weights_fail_the_conditions() {
    let w = assumption_h_check(&builtin_example(), &tol()).unwrap();
    assert!(!w.holds && !w.r_pd && !w.q_psd);
    assert!(w.g_psd && w.g_composite_psd);
}

/// Stage 1 has `𝒪 = 0` and `ℒ = [1, 0]`, so the range condition holds exactly
/// on states with a zero first coordinate. Stage 0 maps `(0, 1)` to `(±1, 1)`
/// and `(1, 0)` to zero.
fn range_sensitive_spec() -> ProblemSpec<f64> {
    let mut spec = ProblemSpec::<f64>::zeros(2, 1, 1, 2);
    let st = spec.stage_mut(0, 0);
    st.a = dmatrix![0.0, 0.0; 0.0, 1.0];
    st.c[0] = dmatrix![0.0, 1.0; 0.0, 0.0];
    st.r = dmatrix![1.0];
    for t in 0..2 {
        let st = spec.stage_mut(t, 1);
        st.a = dmatrix![1.0, 0.0; 0.0, 0.0];
        st.b = dmatrix![1.0; 0.0];
        st.r = dmatrix![-1.0];
        spec.terminal_mut(t).weight = Mat::identity(2, 2);
    }
    spec
}

#[test]
fn fixed_pair_verdicts() {
    let spec = range_sensitive_spec();
    let all = classify_existence(&spec, &Scope::AllPairs, None, &SamplingOptions::default(), &tol()).unwrap();
    assert_eq!(all.verdicts.open_exists, Verdict::No);
    assert!(all.open.psd_all && !all.open.identities_all);

    let scope = Scope::FixedPair {
        t: 0,
        x: vec![0.0, 1.0],
    };
    let r = classify_existence(&spec, &scope, None, &SamplingOptions::default(), &tol()).unwrap();
    assert_eq!(r.verdicts.open_exists, Verdict::No);
    assert_eq!(r.verdicts.feedback_exists, Verdict::No);
    let ev = r.open.sampled.as_ref().unwrap();
    assert_eq!((ev.samples, ev.violating_samples), (256, 256));

    let scope = Scope::FixedPair {
        t: 0,
        x: vec![1.0, 0.0],
    };
    let r = classify_existence(&spec, &scope, None, &SamplingOptions::default(), &tol()).unwrap();
    assert_eq!(r.verdicts.open_exists, Verdict::StateDependent);
    assert_eq!(r.open.sampled.as_ref().unwrap().violating_samples, 0);

    // At the last stage the initial state alone decides.
    let r = classify_existence(
        &spec,
        &Scope::FixedPair {
            t: 1,
            x: vec![2.0, 0.0],
        },
        None,
        &SamplingOptions::default(),
        &tol(),
    )
    .unwrap();
    assert_eq!(r.verdicts.open_exists, Verdict::No);
    assert!(r.open.initial_residual.unwrap() > 1.0);
}

#[test]
fn bad_fixed_pair_inputs() {
    let spec = builtin_example();
    let opts = SamplingOptions::default();
    assert!(classify_existence(&spec, &Scope::FixedPair { t: 0, x: vec![1.0] }, None, &opts, &tol()).is_err());
    assert!(classify_existence(
        &spec,
        &Scope::FixedPair {
            t: 4,
            x: vec![1.0, 1.0]
        },
        None,
        &opts,
        &tol()
    )
    .is_err());
}

#[test]
fn all_pairs_yes_implies_fixed_pair_yes() {
    let spec = builtin_example();
    let phi = reference::psi(2);
    for (t, x) in [(0, vec![1.0, 1.0]), (1, vec![-0.5, 3.0]), (3, vec![0.0, 0.0])] {
        let r = classify_existence(
            &spec,
            &Scope::FixedPair { t, x },
            Some(&phi),
            &SamplingOptions::default(),
            &tol(),
        )
        .unwrap();
        assert_eq!(r.verdicts.mixed_exists_for_given_phi, Some(Verdict::Yes));
    }
    for i in 0..10 {
        let spec = weighted_spec(50 + i, i as usize);
        let x = vec![0.25; spec.n];
        let r = classify_existence(
            &spec,
            &Scope::FixedPair { t: 0, x },
            None,
            &SamplingOptions::default(),
            &tol(),
        )
        .unwrap();
        assert_eq!(r.verdicts.feedback_exists, Verdict::Yes);
        assert_eq!(r.verdicts.feedback_unique, Verdict::Yes);
    }
}

#[test]
fn restarting_along_the_path_reproduces_the_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = random_spec(&mut rng, &RandomSpecOptions::new(2, 2, 2, 5));
    let phi: Vec<Mat<f64>> = (0..5).map(|k| dmatrix![0.1, -0.2 * k as f64; 0.3, 0.0]).collect();
    let full = mixed_backward(&spec, &phi, 0, &tol()).unwrap();
    for k in 1..5 {
        let tail = mixed_backward(&spec, &phi, k, &tol()).unwrap();
        for l in k..5 {
            let (a, b) = (build_policy(&full), build_policy(&tail));
            assert!((a.gain(l) - b.gain(l)).amax() <= 1e-12);
            assert!((a.offset(l) - b.offset(l)).amax() <= 1e-12);
        }
    }
}

#[test]
fn feedback_phi_yields_a_feedback_compatible_mixed_policy() {
    let spec = weighted_spec(7, 4);
    let fb = feedback_backward(&spec, 0, &tol()).unwrap();
    let mixed = mixed_backward(&spec, &full_phi(&spec, 0, &fb.phi()), 0, &tol()).unwrap();
    assert_eq!(build_policy(&mixed).label(&tol()), PolicyLabel::FeedbackCompatible);
    assert_eq!(build_policy(&fb).label(&tol()), PolicyLabel::Feedback);
}

#[test]
fn single_precision_tracks_double() {
    let spec = builtin_example();
    let s32 = spec.cast::<f32>();
    let phi32: Vec<Mat<f32>> = reference::psi(9).iter().map(|m| m.map(|v| v as f32)).collect();
    let t64 = mixed_backward(&spec, &reference::psi(9), 0, &tol()).unwrap();
    let t32 = mixed_backward(&s32, &phi32, 0, &tol()).unwrap();
    for k in 0..4 {
        let (a, b) = (t64.op(k).oo[(0, 0)], t32.op(k).oo[(0, 0)] as f64);
        assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0), "stage {k}: {a} vs {b}");
        let g = build_policy(&t32).gain(k).map(|v| v as f64);
        assert!((g - build_policy(&t64).gain(k)).amax() <= 1e-3);
    }
    let open32 = open_loop_backward(&s32, 0, &tol()).unwrap();
    assert!((open32.op(3).oo[(0, 0)] - 0.4734f32).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn homogeneous_specs_have_no_affine_parts(seed in any::<u64>(), n in 1usize..4, m in 1usize..4, horizon in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opts = RandomSpecOptions::new(n, m, 1, horizon);
        opts.affine = false;
        let spec = random_spec(&mut rng, &opts);
        for tables in [open_loop_backward(&spec, 0, &tol()).unwrap(), feedback_backward(&spec, 0, &tol()).unwrap()] {
            for k in 0..horizon {
                prop_assert_eq!(tables.op(k).theta.amax(), 0.0);
                for l in k..=horizon {
                    prop_assert_eq!(tables.entry(k, l).pi.amax(), 0.0);
                }
            }
        }
    }

    #[test]
    fn tables_are_symmetric_with_exact_terminals(seed in any::<u64>(), n in 1usize..4, m in 1usize..3, horizon in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, &RandomSpecOptions::new(n, m, 2, horizon));
        let phi: Vec<Mat<f64>> = (0..horizon).map(|k| Mat::from_element(m, n, 0.1 * k as f64)).collect();
        let tables = mixed_backward(&spec, &phi, 0, &tol()).unwrap();
        for k in 0..horizon {
            let tm = spec.terminal(k);
            let e = tables.entry(k, horizon);
            prop_assert_eq!(&e.s, &tm.weight);
            prop_assert_eq!(&e.s_cal, &(&tm.weight + &tm.weight_bar));
            prop_assert_eq!(e.t.amax(), 0.0);
            prop_assert_eq!(&e.u, &tm.coupling);
            prop_assert_eq!(&e.pi, &tm.linear);
            for l in k..=horizon {
                let e = tables.entry(k, l);
                prop_assert_eq!(&e.s, &e.s.transpose());
                prop_assert_eq!(&e.s_cal, &e.s_cal.transpose());
            }
            let oo = &tables.op(k).oo;
            prop_assert_eq!(oo, &oo.transpose());
        }
    }

    /// Different `Φ` give different closed-loop gains, but each run satisfies `K = -𝒪⁺ℒ`.
    #[test]
    fn gain_identity_holds_per_run(seed in any::<u64>(), scale in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, &RandomSpecOptions::new(2, 2, 1, 3));
        let phi: Vec<Mat<f64>> = (0..3).map(|_| Mat::from_element(2, 2, scale)).collect();
        let tables = mixed_backward(&spec, &phi, 0, &tol()).unwrap();
        let policy = build_policy(&tables);
        for k in 0..3 {
            let op = tables.op(k);
            let target = -(mixeq::linalg::pinv(&op.o, &tol()).unwrap() * &op.l);
            prop_assert!((policy.gain(k) - target).amax() <= 1e-8 * op.l.amax().max(1.0) / op.o_singular_ratio.max(1e-8));
        }
    }
}
