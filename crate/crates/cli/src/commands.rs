use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use mixeq::equilibrium::{
    build_policy, classify_existence, policy_to_document, ExistenceReport, FamilyReport, SamplingOptions, Scope,
    Verdict,
};
use mixeq::linalg::is_pd;
use mixeq::model::{builtin_example, sample_phi};
use mixeq::recursions::{feedback_backward, full_phi, mixed_backward, open_loop_backward, BackwardTables};
use mixeq::reference::{self, FEEDBACK_OO, LAST_PSI_GAINS, MIXED_O, MIXED_OO, OPEN_OO};
use mixeq::simulate::{
    moment_propagation, sample_covariance, sample_mean_and_se, simulate_closed_loop, trajectories_to_csv, NoiseModel,
    NoiseTree,
};
use mixeq::verify::{
    check_cost_difference, check_definition_inequality, check_jtilde_identity, default_grid, policy_tables,
    probe_directions, Direction, DEFAULT_LAMBDAS,
};
use mixeq::{Matrix, Problem, Tolerances};
use serde_json::{json, Value};

use crate::report::{
    column, input_error, load_phi, load_policy, rows, stage_summary, write_atomic, write_json, Exit, ProblemInput,
    Report,
};
use crate::{
    ClassifyArgs, ExampleArgs, KindArg, Outcome, PhiArgs, ReproduceArgs, ScopeArg, SimulateArgs, SolveArgs, VerifyArgs,
};

/// Largest deviation from a reference value accepted by `reproduce`.
pub const REPRODUCE_TOL: f64 = 1e-3;

fn short_hash(input: &ProblemInput) -> &str {
    &input.sha256[..12]
}

fn fmt_row(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", cells.join(", "))
}

fn fmt_matrix(m: &Matrix) -> String {
    let r: Vec<String> = (0..m.nrows())
        .map(|i| fmt_row(&m.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    r.join(" ")
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Yes => "yes",
        Verdict::No => "no",
        Verdict::StateDependent => "state_dependent",
    }
}

/// Gains named by `--phi` or `--phi-random`, padded to all `N` stages.
fn resolve_phi(a: &PhiArgs, spec: &Problem, t: usize) -> Result<Option<(Vec<Matrix>, String)>> {
    match (&a.phi, a.phi_random) {
        (Some(path), _) => Ok(Some((load_phi(path, spec, t)?, format!("file:{}", path.display())))),
        (None, true) => {
            let seed = a.seed.ok_or_else(|| input_error("--phi-random needs --seed"))?;
            let drawn = sample_phi(spec, seed, 0);
            Ok(Some((full_phi(spec, t, &drawn[t..]), format!("random:seed={seed}"))))
        }
        (None, false) => Ok(None),
    }
}

/// Verdicts over every initial pair from stage `t` on, read off the per-stage checks.
fn from_stage(family: &FamilyReport, t: usize, kind: KindArg) -> (Verdict, Verdict) {
    let tail: Vec<_> = family.stages.iter().filter(|s| s.k >= t).collect();
    let exists = tail.iter().all(|s| s.psd && s.range_l && s.range_theta);
    let unique = match kind {
        KindArg::Open => tail.iter().all(|s| s.psd && s.o_invertible),
        KindArg::Feedback => tail.iter().all(|s| s.pd),
        KindArg::Mixed => false,
    };
    (Verdict::from_bool(exists), Verdict::from_bool(unique))
}

fn stage_table(tables: &BackwardTables<f64>, out: &mut String) -> Result<Vec<Value>> {
    let policy = build_policy(tables);
    let mut summaries = Vec::new();
    writeln!(
        out,
        "{:>5}  {:>12}  {:>12}  {:>10}  gain K",
        "stage", "min eig OO", "min sv O", "sv ratio"
    )?;
    for k in tables.stages() {
        let op = tables.op(k);
        let s = stage_summary(k, op)?;
        let min_eig = s["OO_eigenvalues"][0].as_f64().unwrap_or(f64::NAN);
        let svs = s["O_singular_values"].as_array().cloned().unwrap_or_default();
        let min_sv = svs.last().and_then(Value::as_f64).unwrap_or(f64::NAN);
        writeln!(
            out,
            "{k:>5}  {min_eig:>12.4}  {min_sv:>12.4}  {:>10.3e}  {}",
            op.o_singular_ratio,
            fmt_matrix(&policy.gain(k))
        )?;
        summaries.push(s);
    }
    Ok(summaries)
}

pub fn solve(a: &SolveArgs, tol: &Tolerances) -> Result<(Report, Outcome)> {
    let mut report = Report::new("solve", a, *tol);
    let input = ProblemInput::from_file(&a.problem, tol)?;
    report.problem(&input);
    input.check_stage(a.t)?;
    let spec = &input.spec;
    if let Some(x) = &a.x {
        input.state(x)?;
    }
    let phi = resolve_phi(&a.phi, spec, a.t)?;
    if a.kind != KindArg::Mixed && phi.is_some() {
        return Err(input_error("--phi and --phi-random apply to --kind mixed only"));
    }
    let tables = match a.kind {
        KindArg::Open => open_loop_backward(spec, a.t, tol)?,
        KindArg::Feedback => feedback_backward(spec, a.t, tol)?,
        KindArg::Mixed => {
            let (p, _) = phi
                .as_ref()
                .ok_or_else(|| input_error("--kind mixed needs --phi FILE or --phi-random --seed S"))?;
            mixed_backward(spec, p, a.t, tol)?
        }
    };
    let policy = build_policy(&tables);
    let scope = match &a.x {
        Some(x) => Scope::FixedPair { t: a.t, x: x.clone() },
        None => Scope::AllPairs,
    };
    let sampling = SamplingOptions {
        samples: a.samples,
        ..SamplingOptions::default()
    };
    let existence = classify_existence(spec, &scope, phi.as_ref().map(|p| p.0.as_slice()), &sampling, tol)?;
    let family = match a.kind {
        KindArg::Open => &existence.open,
        KindArg::Feedback => &existence.feedback,
        KindArg::Mixed => existence.mixed.as_ref().expect("gains supplied for the mixed family"),
    };
    let (exists, unique) = match scope {
        Scope::AllPairs => from_stage(family, a.t, a.kind),
        Scope::FixedPair { .. } => {
            let (_, unique) = from_stage(family, a.t, a.kind);
            (family.exists, unique)
        }
    };

    let label = policy.label(tol);
    let doc = policy_to_document(&policy);
    if let Some(path) = &a.policy_out {
        write_json(path, &doc)?;
    }
    let mut summary = String::new();
    writeln!(
        summary,
        "{} solve from t = {} on {} (sha256 {})",
        a.kind_name(),
        a.t,
        input.source,
        short_hash(&input)
    )?;
    if let Some((_, source)) = &phi {
        writeln!(summary, "pure-feedback gains: {source}")?;
    }
    let stages = stage_table(&tables, &mut summary)?;
    writeln!(
        summary,
        "policy label: {}",
        serde_json::to_value(label)?.as_str().unwrap_or_default()
    )?;
    writeln!(summary, "exists: {}", verdict_str(exists))?;
    if a.kind != KindArg::Mixed {
        writeln!(summary, "unique: {}", verdict_str(unique))?;
    }
    if let Some(path) = &a.policy_out {
        writeln!(summary, "policy written to {}", path.display())?;
    }
    let exit = if exists == Verdict::No {
        Exit::Nonexistent
    } else {
        Exit::Ok
    };
    let result = json!({
        "kind": a.kind,
        "t": a.t,
        "x": a.x,
        "phi_source": phi.as_ref().map(|p| p.1.clone()),
        "stages": stages,
        "label": label,
        "exists": exists,
        "unique": if a.kind == KindArg::Mixed { Value::Null } else { json!(unique) },
        "existence": existence,
        "notes": tables.notes,
        "policy": doc,
    });
    Ok((report, Outcome { result, summary, exit }))
}

impl SolveArgs {
    fn kind_name(&self) -> &'static str {
        match self.kind {
            KindArg::Open => "open-loop",
            KindArg::Feedback => "feedback",
            KindArg::Mixed => "mixed",
        }
    }
}

fn family_lines(name: &str, f: &FamilyReport, out: &mut String) -> Result<()> {
    writeln!(out, "{name}:")?;
    for s in &f.stages {
        writeln!(
            out,
            "  k={}  min eig {:>10.4}  psd {:<5}  range L {:<5} ({:.2e})  range theta {:<5} ({:.2e})  sv ratio {:.3e}",
            s.k,
            s.min_eig,
            s.psd,
            s.range_l,
            s.range_l_residual,
            s.range_theta,
            s.range_theta_residual,
            s.o_singular_ratio
        )?;
    }
    if let Some(ev) = &f.sampled {
        writeln!(
            out,
            "  sampled {} paths, {} violating (seed {})",
            ev.samples, ev.violating_samples, ev.seed
        )?;
    }
    Ok(())
}

fn existence_summary(r: &ExistenceReport) -> Result<String> {
    let mut out = String::new();
    family_lines("open-loop", &r.open, &mut out)?;
    family_lines("feedback", &r.feedback, &mut out)?;
    if let Some(m) = &r.mixed {
        family_lines("mixed", m, &mut out)?;
    }
    let v = &r.verdicts;
    writeln!(out, "open_exists: {}", verdict_str(v.open_exists))?;
    writeln!(out, "feedback_exists: {}", verdict_str(v.feedback_exists))?;
    if let Some(m) = v.mixed_exists_for_given_phi {
        writeln!(out, "mixed_exists_for_given_phi: {}", verdict_str(m))?;
    }
    writeln!(out, "open_unique: {}", verdict_str(v.open_unique))?;
    writeln!(out, "feedback_unique: {}", verdict_str(v.feedback_unique))?;
    writeln!(out, "H_holds: {}", verdict_str(v.h_holds))?;
    Ok(out)
}

pub fn classify(a: &ClassifyArgs, tol: &Tolerances) -> Result<(Report, Outcome)> {
    let mut report = Report::new("classify", a, *tol);
    let input = ProblemInput::from_file(&a.problem, tol)?;
    report.problem(&input);
    let spec = &input.spec;
    let scope = match a.scope {
        ScopeArg::All => {
            if a.t.is_some() || a.x.is_some() {
                return Err(input_error("--scope all takes no --t or --x"));
            }
            Scope::AllPairs
        }
        ScopeArg::Fixed => {
            let (Some(t), Some(x)) = (a.t, &a.x) else {
                return Err(input_error("--scope fixed needs --t and --x"));
            };
            input.check_stage(t)?;
            input.state(x)?;
            Scope::FixedPair { t, x: x.clone() }
        }
    };
    let t = match &scope {
        Scope::FixedPair { t, .. } => *t,
        Scope::AllPairs => 0,
    };
    let phi = resolve_phi(&a.phi, spec, t)?;
    let sampling = SamplingOptions {
        samples: a.samples,
        seed: a.sample_seed,
        noise: a.noise.into(),
    };
    let existence = classify_existence(spec, &scope, phi.as_ref().map(|p| p.0.as_slice()), &sampling, tol)?;
    let mut summary = format!(
        "classify {} on {} (sha256 {})\n",
        scope_name(&scope),
        input.source,
        short_hash(&input)
    );
    summary.push_str(&existence_summary(&existence)?);
    let result = json!({
        "phi_source": phi.as_ref().map(|p| p.1.clone()),
        "existence": existence,
    });
    Ok((
        report,
        Outcome {
            result,
            summary,
            exit: Exit::Ok,
        },
    ))
}

fn scope_name(s: &Scope) -> String {
    match s {
        Scope::AllPairs => "all pairs".into(),
        Scope::FixedPair { t, x } => format!("fixed pair t = {t}, x = {}", fmt_row(x)),
    }
}

fn policy_start(policy_t: usize, requested: Option<usize>) -> Result<()> {
    match requested {
        Some(t) if t != policy_t => Err(input_error(format!(
            "--t {t} does not match the policy's t = {policy_t}"
        ))),
        _ => Ok(()),
    }
}

pub fn simulate(a: &SimulateArgs, tol: &Tolerances) -> Result<(Report, Outcome)> {
    let mut report = Report::new("simulate", a, *tol);
    let input = ProblemInput::from_file(&a.problem, tol)?;
    report.problem(&input);
    let spec = &input.spec;
    let policy = load_policy(&a.policy, spec)?;
    policy_start(policy.t, a.t)?;
    let x = input.state(&a.x)?;
    if a.reps == 0 {
        return Err(input_error("--reps must be positive"));
    }
    let model = NoiseModel::new(spec, a.noise.into())?;
    let trajs = simulate_closed_loop(spec, &policy, &x, &model, a.reps, a.seed)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut files = Vec::new();
    if a.long {
        let name = "trajectories.csv".to_string();
        write_atomic(&a.out.join(&name), trajectories_to_csv(&trajs, true).as_bytes())?;
        files.push(name);
    } else {
        for tr in &trajs {
            let name = format!("rep_{:05}.csv", tr.rep);
            write_atomic(
                &a.out.join(&name),
                trajectories_to_csv(std::slice::from_ref(tr), false).as_bytes(),
            )?;
            files.push(name);
        }
    }

    let moments = moment_propagation(spec, &policy, &x)?;
    let (means, ses) = sample_mean_and_se(&trajs);
    let covs = sample_covariance(&trajs);
    let stages: Vec<Value> = (0..means.len())
        .map(|j| {
            let mu = &moments.mean_star[j];
            let exact_cov = &moments.second_star[j] - mu * mu.transpose();
            json!({
                "stage": policy.t + j,
                "mean": means[j],
                "standard_error": ses[j],
                "covariance": rows(&covs[j]),
                "exact_mean": column(mu),
                "exact_covariance": rows(&exact_cov),
            })
        })
        .collect();
    let r = trajs.len() as f64;
    let costs: Vec<f64> = trajs.iter().map(|tr| tr.cost).collect();
    let cost_mean = costs.iter().sum::<f64>() / r;
    let cost_se = if trajs.len() > 1 {
        (costs.iter().map(|c| (c - cost_mean).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt()
    } else {
        0.0
    };
    let identical = trajs.windows(2).all(|w| w[0].states == w[1].states);
    let result = json!({
        "t": policy.t,
        "x": a.x,
        "reps": a.reps,
        "seed": a.seed,
        "noise": a.noise,
        "files": files,
        "identical_paths": identical,
        "stages": stages,
        "cost": {"mean": cost_mean, "standard_error": cost_se, "exact": moments.cost},
    });
    write_json(&a.out.join("summary.json"), &result)?;

    let mut summary = format!(
        "simulated {} paths from t = {} on {} (sha256 {}), seed {}\n",
        a.reps,
        policy.t,
        input.source,
        short_hash(&input),
        a.seed
    );
    writeln!(
        summary,
        "{:>5}  {:<28}  {:<28}  exact mean",
        "stage", "sample mean", "standard error"
    )?;
    for (j, (m, s)) in means.iter().zip(&ses).enumerate() {
        writeln!(
            summary,
            "{:>5}  {:<28}  {:<28}  {}",
            policy.t + j,
            fmt_row(m),
            fmt_row(s),
            fmt_row(moments.mean_star[j].as_slice())
        )?;
    }
    writeln!(
        summary,
        "cost: {cost_mean:.6} +/- {cost_se:.6} (exact {:.6})",
        moments.cost
    )?;
    writeln!(
        summary,
        "wrote {} file(s) and summary.json to {}",
        files.len(),
        a.out.display()
    )?;
    Ok((
        report,
        Outcome {
            result,
            summary,
            exit: Exit::Ok,
        },
    ))
}

pub fn verify(a: &VerifyArgs, tol: &Tolerances) -> Result<(Report, Outcome)> {
    let mut report = Report::new("verify", a, *tol);
    let input = ProblemInput::from_file(&a.problem, tol)?;
    report.problem(&input);
    let spec = &input.spec;
    let policy = load_policy(&a.policy, spec)?;
    policy_start(policy.t, a.t)?;
    let x = input.state(&a.x)?;
    let tree = NoiseTree::build(spec, &policy, &x, a.depth_limit)?;
    let tables = policy_tables(spec, &policy, tol)?;
    let phi = full_phi(spec, policy.t, &policy.phis);
    let directions = probe_directions(spec.m, a.probes, a.seed);

    let mut probes = Vec::new();
    let mut identities = Vec::new();
    let (mut worst_a, mut worst_b, mut worst_id) = (0.0f64, 0.0f64, 0.0f64);
    for k in policy.stages() {
        for (j, u) in directions.iter().enumerate() {
            let pr = check_cost_difference(
                spec,
                &policy,
                &tables,
                &tree,
                k,
                &Direction::Fixed(u.clone()),
                &DEFAULT_LAMBDAS,
            )?;
            let max_abs_a = pr.nodes.iter().map(|n| n.a.abs()).fold(0.0, f64::max);
            let min_b = pr.nodes.iter().map(|n| n.b).fold(f64::INFINITY, f64::min);
            worst_a = worst_a.max(pr.max_a_error);
            worst_b = worst_b.max(pr.max_b_error);
            probes.push(json!({
                "k": k,
                "probe": j,
                "direction": column(u),
                "nodes": pr.nodes.len(),
                "max_abs_a": max_abs_a,
                "min_b": min_b,
                "max_a_error": pr.max_a_error,
                "max_b_error": pr.max_b_error,
                "max_fit_residual": pr.max_fit_residual,
            }));
            let id = check_jtilde_identity(spec, &phi, policy.t, k, u, tol)?;
            worst_id = worst_id.max(id.residual);
            identities.push(json!({"probe": j, "check": id}));
        }
    }
    let stages: Vec<usize> = policy.stages().collect();
    let inequality = check_definition_inequality(spec, &policy, &tree, &stages, &default_grid(), tol)?;

    let mut summary = format!(
        "verify policy {} from t = {} on {} (sha256 {}), tree depth {}\n",
        a.policy.display(),
        policy.t,
        input.source,
        short_hash(&input),
        tree.depth()
    );
    writeln!(
        summary,
        "cost-difference probes: max |a - a*| {worst_a:.3e}, max |b - b*| {worst_b:.3e}"
    )?;
    writeln!(summary, "quadratic-form identity: max residual {worst_id:.3e}")?;
    writeln!(
        summary,
        "{:>5}  {:>8}  {:>14}  {:>12}  {:>12}  grid  certificate",
        "stage", "nodes", "worst margin", "max |r|", "min curv"
    )?;
    for s in &inequality.stages {
        writeln!(
            summary,
            "{:>5}  {:>8}  {:>14.6e}  {:>12.3e}  {:>12.4}  {:<4}  {}",
            s.k, s.nodes, s.worst_margin, s.max_linear_term, s.min_curvature, s.grid_pass, s.certificate_pass
        )?;
    }
    writeln!(
        summary,
        "definition inequality: {}",
        if inequality.pass { "pass" } else { "FAIL" }
    )?;
    let exit = if inequality.pass { Exit::Ok } else { Exit::Nonexistent };
    let result = json!({
        "t": policy.t,
        "x": a.x,
        "depth": tree.depth(),
        "probes": probes,
        "max_a_error": worst_a,
        "max_b_error": worst_b,
        "identities": identities,
        "max_identity_residual": worst_id,
        "inequality": inequality,
        "pass": inequality.pass,
    });
    Ok((report, Outcome { result, summary, exit }))
}

struct Comparison {
    quantity: String,
    stage: usize,
    computed: f64,
    reference: f64,
}

impl Comparison {
    fn deviation(&self) -> f64 {
        (self.computed - self.reference).abs()
    }
}

fn compare_tuple(
    rows: &mut Vec<Comparison>,
    quantity: &str,
    tables: &BackwardTables<f64>,
    pick: impl Fn(&mixeq::recursions::StageOps<f64>) -> f64,
    reference: &[f64; 4],
) {
    for (k, &r) in reference.iter().enumerate() {
        rows.push(Comparison {
            quantity: quantity.into(),
            stage: k,
            computed: pick(tables.op(k)),
            reference: r,
        });
    }
}

pub fn reproduce(a: &ReproduceArgs, tol: &Tolerances) -> Result<(Report, Outcome)> {
    let mut report = Report::new("reproduce", a, *tol);
    let spec = builtin_example();
    let input = ProblemInput::builtin("example", spec.clone());
    report.problem(&input);

    let mut cmp = Vec::new();
    let open = open_loop_backward(&spec, 0, tol)?;
    compare_tuple(&mut cmp, "open OO", &open, |o| o.oo[(0, 0)], &OPEN_OO);
    let fb = feedback_backward(&spec, 0, tol)?;
    compare_tuple(&mut cmp, "feedback OO", &fb, |o| o.oo[(0, 0)], &FEEDBACK_OO);
    for i in 0..reference::PSI.len() {
        let tables = mixed_backward(&spec, &reference::psi(i), 0, tol)?;
        compare_tuple(
            &mut cmp,
            &format!("psi{:02} OO", i + 1),
            &tables,
            |o| o.oo[(0, 0)],
            &MIXED_OO[i],
        );
        compare_tuple(
            &mut cmp,
            &format!("psi{:02} O", i + 1),
            &tables,
            |o| o.o[(0, 0)],
            &MIXED_O[i],
        );
        if i + 1 == reference::PSI.len() {
            let policy = build_policy(&tables);
            for (k, row) in LAST_PSI_GAINS.iter().enumerate() {
                for (j, &r) in row.iter().enumerate() {
                    cmp.push(Comparison {
                        quantity: format!("psi{:02} K[{}]", i + 1, j + 1),
                        stage: k,
                        computed: policy.gain(k)[(0, j)],
                        reference: r,
                    });
                }
            }
        }
    }

    let mut summary = String::new();
    writeln!(
        summary,
        "{:<16} {:>5}  {:>12}  {:>12}  {:>10}",
        "quantity", "stage", "computed", "reference", "deviation"
    )?;
    let mut mismatches = 0;
    for c in &cmp {
        let ok = c.deviation() <= REPRODUCE_TOL;
        if !ok {
            mismatches += 1;
        }
        writeln!(
            summary,
            "{:<16} {:>5}  {:>12.4}  {:>12.4}  {:>10.2e}{}",
            c.quantity,
            c.stage,
            c.computed,
            c.reference,
            c.deviation(),
            if ok { "" } else { "  *" }
        )?;
    }
    writeln!(
        summary,
        "{} of {} entries within {REPRODUCE_TOL:e}",
        cmp.len() - mismatches,
        cmp.len()
    )?;

    let mut draws = Vec::new();
    if let Some(seed) = a.seed {
        writeln!(summary, "random gains (seed {seed}):")?;
        for d in 0..a.draws {
            let phi = sample_phi(&spec, seed, d as u64);
            let tables = mixed_backward(&spec, &phi, 0, tol)?;
            let oo_positive = tables
                .ops
                .iter()
                .map(|o| is_pd(&o.oo, tol))
                .collect::<mixeq::Result<Vec<_>>>()?
                .into_iter()
                .all(|b| b);
            let o_invertible = tables.ops.iter().all(|o| o.o_singular_ratio > tol.invert_rtol);
            let existence = classify_existence(&spec, &Scope::AllPairs, Some(&phi), &SamplingOptions::default(), tol)?;
            let mixed = existence.verdicts.mixed_exists_for_given_phi.unwrap_or(Verdict::No);
            let oo: Vec<f64> = tables.ops.iter().map(|o| o.oo[(0, 0)]).collect();
            let o: Vec<f64> = tables.ops.iter().map(|o| o.o[(0, 0)]).collect();
            writeln!(
                summary,
                "  draw {d:>3}: OO {}  O {}  OO > 0: {oo_positive}  O invertible: {o_invertible}  mixed exists: {}",
                fmt_row(&oo),
                fmt_row(&o),
                verdict_str(mixed)
            )?;
            draws.push(json!({
                "draw": d,
                "Phi": phi.iter().map(rows).collect::<Vec<_>>(),
                "OO": oo,
                "O": o,
                "OO_positive": oo_positive,
                "O_invertible": o_invertible,
                "mixed_exists": mixed,
                "accepted": oo_positive && o_invertible,
            }));
        }
    }

    let exit = if mismatches == 0 { Exit::Ok } else { Exit::Mismatch };
    let result = json!({
        "tolerance": REPRODUCE_TOL,
        "comparisons": cmp.iter().map(|c| json!({
            "quantity": c.quantity,
            "stage": c.stage,
            "computed": c.computed,
            "reference": c.reference,
            "deviation": c.deviation(),
            "within_tolerance": c.deviation() <= REPRODUCE_TOL,
        })).collect::<Vec<_>>(),
        "mismatches": mismatches,
        "random_draws": draws,
    });
    Ok((report, Outcome { result, summary, exit }))
}

pub fn example(a: &ExampleArgs, tol: &Tolerances) -> Result<(Report, Outcome)> {
    let mut report = Report::new("example", a, *tol);
    let spec = builtin_example();
    let input = ProblemInput::builtin("example", spec.clone());
    report.problem(&input);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut files = vec!["example4.json".to_string()];
    write_json(&a.out.join("example4.json"), &spec.to_document())?;
    let count = reference::PSI.len();
    for i in 0..count {
        let doc = json!({"Phi": reference::psi(i).iter().map(rows).collect::<Vec<_>>()});
        let name = format!("psi{:02}.json", i + 1);
        write_json(&a.out.join(&name), &doc)?;
        files.push(name);
        if i + 1 == count {
            write_json(&a.out.join("last_psi.json"), &doc)?;
            files.push("last_psi.json".into());
        }
    }
    let summary = format!("wrote {} files to {}\n", files.len(), a.out.display());
    Ok((
        report,
        Outcome {
            result: json!({"files": files}),
            summary,
            exit: Exit::Ok,
        },
    ))
}
