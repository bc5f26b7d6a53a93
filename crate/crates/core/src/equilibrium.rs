//! Policy construction from backward tables, existence and uniqueness
//! classification, and the sufficient weight conditions.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, Tolerances};
use crate::model::ProblemSpec;
use crate::recursions::{self, BackwardTables, SolverKind};
use crate::scalar::{Mat, Scalar, Vector};
use crate::simulate::{self, NoiseKind, NoiseModel};

/// Affine control rule `u_k = Φ_k X_k + Γ_k X*_k + c_k` for stages `t..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPolicy<T: Scalar> {
    pub kind: SolverKind,
    pub t: usize,
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    /// `phi[k - t]`
    pub phis: Vec<Mat<T>>,
    pub gammas: Vec<Mat<T>>,
    pub offsets: Vec<Vector<T>>,
}

impl<T: Scalar> EquilibriumPolicy<T> {
    pub fn phi(&self, k: usize) -> &Mat<T> {
        &self.phis[k - self.t]
    }

    pub fn gamma(&self, k: usize) -> &Mat<T> {
        &self.gammas[k - self.t]
    }

    pub fn offset(&self, k: usize) -> &Vector<T> {
        &self.offsets[k - self.t]
    }

    /// Closed-loop gain `K_k = Φ_k + Γ_k`.
    pub fn gain(&self, k: usize) -> Mat<T> {
        self.phi(k) + self.gamma(k)
    }

    /// Control along the policy's own closed loop: `K_k x + c_k`.
    pub fn control(&self, k: usize, x: &Vector<T>) -> Vector<T> {
        self.gain(k) * x + self.offset(k)
    }

    /// Control of a subproblem state `x` while the open-loop part follows `xstar`.
    pub fn rule_control(&self, k: usize, x: &Vector<T>, xstar: &Vector<T>) -> Vector<T> {
        self.phi(k) * x + self.open_part(k, xstar)
    }

    /// Open-loop part `v_k = Γ_k X*_k + c_k`.
    pub fn open_part(&self, k: usize, xstar: &Vector<T>) -> Vector<T> {
        self.gamma(k) * xstar + self.offset(k)
    }

    pub fn stages(&self) -> std::ops::Range<usize> {
        self.t..self.horizon
    }

    /// How the policy should be read. A mixed policy whose open-loop state
    /// coefficient vanishes is a pure feedback strategy in disguise.
    pub fn label(&self, tol: &Tolerances) -> PolicyLabel {
        match self.kind {
            SolverKind::Open => PolicyLabel::Open,
            SolverKind::Feedback => PolicyLabel::Feedback,
            SolverKind::Mixed => {
                let flat = self.stages().all(|k| {
                    let scale = self.gain(k).norm().max(T::one());
                    self.gamma(k).norm() <= T::lit(tol.range_tol) * scale
                });
                if flat {
                    PolicyLabel::FeedbackCompatible
                } else {
                    PolicyLabel::Mixed
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> EquilibriumPolicy<U> {
        let cm = |m: &Mat<T>| m.map(|v| U::lit(v.as_f64()));
        EquilibriumPolicy {
            kind: self.kind,
            t: self.t,
            horizon: self.horizon,
            n: self.n,
            m: self.m,
            phis: self.phis.iter().map(cm).collect(),
            gammas: self.gammas.iter().map(cm).collect(),
            offsets: self.offsets.iter().map(|v| v.map(|x| U::lit(x.as_f64()))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyLabel {
    Open,
    Feedback,
    Mixed,
    FeedbackCompatible,
}

/// Reads `Φ`, `Γ` and `c` off a solved set of tables.
pub fn build_policy<T: Scalar>(tables: &BackwardTables<T>) -> EquilibriumPolicy<T> {
    EquilibriumPolicy {
        kind: tables.kind,
        t: tables.t,
        horizon: tables.horizon,
        n: tables.n,
        m: tables.m,
        phis: tables.ops.iter().map(|o| o.phi.clone()).collect(),
        gammas: tables.ops.iter().map(|o| o.gamma.clone()).collect(),
        offsets: tables.ops.iter().map(|o| o.c.clone()).collect(),
    }
}

// Adding 0.0 turns -0.0 into 0.0.
fn mat_rows(m: &Mat<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| json!(m.row(i).iter().map(|v| v + 0.0).collect::<Vec<f64>>()))
            .collect(),
    )
}

/// Policy document: `{"t", "kind", "K", "Phi", "Gamma", "c"}`, stage-indexed, matrices row-major.
pub fn policy_to_document(policy: &EquilibriumPolicy<f64>) -> Value {
    json!({
        "t": policy.t,
        "kind": policy.kind.to_string(),
        "K": policy.stages().map(|k| mat_rows(&policy.gain(k))).collect::<Vec<_>>(),
        "Phi": policy.phis.iter().map(mat_rows).collect::<Vec<_>>(),
        "Gamma": policy.gammas.iter().map(mat_rows).collect::<Vec<_>>(),
        "c": policy.offsets.iter().map(|v| json!(v.iter().map(|x| x + 0.0).collect::<Vec<f64>>())).collect::<Vec<_>>(),
    })
}

fn read_mat(v: &Value, rows: usize, cols: usize, what: &str) -> Result<Mat<f64>> {
    let bad = || Error::Schema(format!("{what}: expected a {rows}x{cols} array of rows"));
    let arr = v.as_array().ok_or_else(bad)?;
    if arr.len() != rows {
        return Err(bad());
    }
    let mut out = Mat::zeros(rows, cols);
    for (i, row) in arr.iter().enumerate() {
        let row = row.as_array().ok_or_else(bad)?;
        if row.len() != cols {
            return Err(bad());
        }
        for (j, x) in row.iter().enumerate() {
            out[(i, j)] = x.as_f64().ok_or_else(bad)?;
        }
    }
    Ok(out)
}

/// Parses a policy document for a problem of the given sizes. `Phi` and `Gamma`
/// may be omitted when `K` is present, in which case the rule is read as a pure
/// feedback `Φ = K`.
pub fn policy_from_document(doc: &Value, spec: &ProblemSpec<f64>) -> Result<EquilibriumPolicy<f64>> {
    let (n, m) = (spec.n, spec.m);
    let t = doc
        .get("t")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Schema("policy: missing integer \"t\"".into()))? as usize;
    if t >= spec.horizon {
        return Err(Error::Schema(format!(
            "policy: t = {t} is not before the horizon {}",
            spec.horizon
        )));
    }
    let stages = spec.horizon - t;
    let list = |key: &str| -> Result<Option<Vec<Mat<f64>>>> {
        match doc.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Array(a)) if a.len() == stages => a
                .iter()
                .enumerate()
                .map(|(i, v)| read_mat(v, m, n, &format!("policy {key}[{i}]")))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(Error::Schema(format!("policy: \"{key}\" must list {stages} stages"))),
        }
    };
    let k = list("K")?;
    let phis = list("Phi")?;
    let gammas = list("Gamma")?;
    let (phis, gammas) = match (phis, gammas, k) {
        (Some(p), Some(g), _) => (p, g),
        (Some(p), None, Some(k)) => {
            let g = k.iter().zip(&p).map(|(k, p)| k - p).collect();
            (p, g)
        }
        (None, Some(g), Some(k)) => {
            let p = k.iter().zip(&g).map(|(k, g)| k - g).collect();
            (p, g)
        }
        (None, None, Some(k)) => (k, vec![Mat::zeros(m, n); stages]),
        _ => return Err(Error::Schema("policy: need \"K\" or both \"Phi\" and \"Gamma\"".into())),
    };
    let offsets = match doc.get("c") {
        None | Some(Value::Null) => vec![Vector::zeros(m); stages],
        Some(Value::Array(a)) if a.len() == stages => a
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let bad = || Error::Schema(format!("policy c[{i}]: expected {m} numbers"));
                let arr = v.as_array().ok_or_else(bad)?;
                if arr.len() != m {
                    return Err(bad());
                }
                arr.iter()
                    .map(|x| x.as_f64().ok_or_else(bad))
                    .collect::<Result<Vec<_>>>()
                    .map(Vector::from_vec)
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::Schema(format!("policy: \"c\" must list {stages} stages"))),
    };
    let kind = match doc.get("kind").and_then(Value::as_str) {
        Some(s) => s.parse()?,
        None => SolverKind::Mixed,
    };
    let all_finite = phis.iter().chain(&gammas).all(|a| a.iter().all(|v| v.is_finite()))
        && offsets.iter().all(|v| v.iter().all(|x| x.is_finite()));
    if !all_finite {
        return Err(Error::NonFinite("policy".into()));
    }
    Ok(EquilibriumPolicy {
        kind,
        t,
        horizon: spec.horizon,
        n,
        m,
        phis,
        gammas,
        offsets,
    })
}

/// `r = 𝒪_k (Φ_k X + Γ_k X + c_k) + ℒ_k X + θ_k`, the stationarity residual at state `X`.
pub fn stationarity_residual<T: Scalar>(
    policy: &EquilibriumPolicy<T>,
    tables: &BackwardTables<T>,
    x: &Vector<T>,
    k: usize,
) -> Vector<T> {
    let op = tables.op(k);
    &op.o * policy.control(k, x) + &op.l * x + &op.theta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    StateDependent,
}

impl Verdict {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Yes
        } else {
            Verdict::No
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum Scope {
    AllPairs,
    FixedPair { t: usize, x: Vec<f64> },
}

/// Per-stage operator checks for one solver family.
#[derive(Debug, Clone, Serialize)]
pub struct StageCheck {
    pub k: usize,
    /// Smallest eigenvalue of the convexity operator (`𝕆`, `𝕆̂` or `𝕆̃`).
    pub min_eig: f64,
    pub psd: bool,
    pub pd: bool,
    /// `||𝒪 𝒪^+ ℒ - ℒ||`
    pub range_l_residual: f64,
    pub range_l: bool,
    pub range_theta_residual: f64,
    pub range_theta: bool,
    pub o_singular_ratio: f64,
    pub o_invertible: bool,
}

/// Monte-Carlo evidence for the state-dependent range condition.
#[derive(Debug, Clone, Serialize)]
pub struct SampleEvidence {
    pub samples: usize,
    pub seed: u64,
    /// Trajectories with at least one stage outside the range.
    pub violating_samples: usize,
    pub worst_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilyReport {
    pub kind: SolverKind,
    pub stages: Vec<StageCheck>,
    pub psd_all: bool,
    pub identities_all: bool,
    /// Range residual of `ℒ_t x + θ_t` at the fixed initial pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled: Option<SampleEvidence>,
    pub exists: Verdict,
    /// Every `𝒪` invertible (open family) or every `𝕆` positive definite (feedback family).
    pub unique: Verdict,
}

/// Sign conditions on the weights that guarantee a unique feedback strategy.
#[derive(Debug, Clone, Serialize)]
pub struct WeightConditions {
    pub q_psd: bool,
    pub q_composite_psd: bool,
    pub g_psd: bool,
    pub g_composite_psd: bool,
    pub r_pd: bool,
    pub r_composite_pd: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdicts {
    pub open_exists: Verdict,
    pub feedback_exists: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixed_exists_for_given_phi: Option<Verdict>,
    pub open_unique: Verdict,
    pub feedback_unique: Verdict,
    #[serde(rename = "H_holds")]
    pub h_holds: Verdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExistenceReport {
    pub scope: Scope,
    pub open: FamilyReport,
    pub feedback: FamilyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixed: Option<FamilyReport>,
    pub weights: WeightConditions,
    pub verdicts: Verdicts,
}

/// Controls the Monte-Carlo part of fixed-pair classification.
#[derive(Debug, Clone, Copy)]
pub struct SamplingOptions {
    pub samples: usize,
    pub seed: u64,
    pub noise: NoiseKind,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            samples: 256,
            seed: 0,
            noise: NoiseKind::Gaussian,
        }
    }
}

fn stage_checks<T: Scalar>(tables: &BackwardTables<T>, tol: &Tolerances) -> Result<Vec<StageCheck>> {
    tables
        .stages()
        .map(|k| {
            let op = tables.op(k);
            let (min_eig, psd) = linalg::psd_margin(&op.oo, tol)?;
            let pd = linalg::is_pd(&op.oo, tol)?;
            let theta = Mat::from_column_slice(op.theta.len(), 1, op.theta.as_slice());
            let rl = linalg::range_residual(&op.o, &op.l, tol)?;
            let rt = linalg::range_residual(&op.o, &theta, tol)?;
            let ratio = linalg::singular_ratio(&op.o)?;
            Ok(StageCheck {
                k,
                min_eig: min_eig.as_f64(),
                psd,
                pd,
                range_l_residual: rl.as_f64(),
                range_l: rl <= T::lit(tol.range_tol) * op.l.norm().max(T::one()),
                range_theta_residual: rt.as_f64(),
                range_theta: rt <= T::lit(tol.range_tol) * op.theta.norm().max(T::one()),
                o_singular_ratio: ratio.as_f64(),
                o_invertible: ratio > T::lit(tol.invert_rtol),
            })
        })
        .collect()
}

fn state_residual<T: Scalar>(
    tables: &BackwardTables<T>,
    k: usize,
    x: &Vector<T>,
    tol: &Tolerances,
) -> Result<(T, bool)> {
    let op = tables.op(k);
    let v = &op.l * x + &op.theta;
    let vm = Mat::from_column_slice(v.len(), 1, v.as_slice());
    let res = linalg::range_residual(&op.o, &vm, tol)?;
    Ok((res, res <= T::lit(tol.range_tol) * v.norm().max(T::one())))
}

fn family_report<T: Scalar>(
    spec: &ProblemSpec<T>,
    tables: &BackwardTables<T>,
    x: Option<&Vector<T>>,
    sampling: &SamplingOptions,
    tol: &Tolerances,
) -> Result<FamilyReport> {
    let stages = stage_checks(tables, tol)?;
    let psd_all = stages.iter().all(|s| s.psd);
    let identities_all = stages.iter().all(|s| s.range_l && s.range_theta);
    let unique = match tables.kind {
        SolverKind::Feedback => stages.iter().all(|s| s.pd),
        _ => psd_all && stages.iter().all(|s| s.o_invertible),
    };
    let mut report = FamilyReport {
        kind: tables.kind,
        stages,
        psd_all,
        identities_all,
        initial_residual: None,
        sampled: None,
        exists: Verdict::from_bool(psd_all && identities_all),
        unique: Verdict::from_bool(unique),
    };
    let Some(x) = x else { return Ok(report) };
    if !psd_all || identities_all {
        return Ok(report);
    }
    let (res0, ok0) = state_residual(tables, tables.t, x, tol)?;
    report.initial_residual = Some(res0.as_f64());
    if !ok0 {
        report.exists = Verdict::No;
        return Ok(report);
    }
    let policy = build_policy(tables);
    let model = NoiseModel::new(spec, sampling.noise)?;
    let trajs = simulate::simulate_closed_loop(spec, &policy, x, &model, sampling.samples, sampling.seed)?;
    let mut violating = 0;
    let mut worst = 0.0f64;
    for tr in &trajs {
        let mut bad = false;
        for (j, xs) in tr.states.iter().enumerate().take(spec.horizon - tables.t).skip(1) {
            let (res, ok) = state_residual(tables, tables.t + j, xs, tol)?;
            worst = worst.max(res.as_f64());
            bad |= !ok;
        }
        violating += bad as usize;
    }
    report.sampled = Some(SampleEvidence {
        samples: sampling.samples,
        seed: sampling.seed,
        violating_samples: violating,
        worst_residual: worst,
    });
    report.exists = if violating > 0 {
        Verdict::No
    } else {
        Verdict::StateDependent
    };
    Ok(report)
}

/// Checks the weight sign conditions over every stage pair.
pub fn assumption_h_check<T: Scalar>(spec: &ProblemSpec<T>, tol: &Tolerances) -> Result<WeightConditions> {
    let mut w = WeightConditions {
        q_psd: true,
        q_composite_psd: true,
        g_psd: true,
        g_composite_psd: true,
        r_pd: true,
        r_composite_pd: true,
        holds: false,
    };
    for t in 0..spec.horizon {
        for k in t..spec.horizon {
            let st = spec.stage(t, k);
            w.q_psd &= linalg::is_psd(&st.q, tol)?;
            w.q_composite_psd &= linalg::is_psd(&(&st.q + &st.q_bar), tol)?;
            w.r_pd &= linalg::is_pd(&st.r, tol)?;
            w.r_composite_pd &= linalg::is_pd(&(&st.r + &st.r_bar), tol)?;
        }
        let tm = spec.terminal(t);
        w.g_psd &= linalg::is_psd(&tm.weight, tol)?;
        w.g_composite_psd &= linalg::is_psd(&(&tm.weight + &tm.weight_bar), tol)?;
    }
    w.holds = w.q_psd && w.q_composite_psd && w.g_psd && w.g_composite_psd && w.r_pd && w.r_composite_pd;
    Ok(w)
}

/// Uniqueness verdicts for stages `t..N`.
#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    pub t: usize,
    pub open_solvable: bool,
    pub open_invertible: Vec<bool>,
    pub feedback_positive: Vec<bool>,
    pub open_unique: Verdict,
    pub feedback_unique: Verdict,
}

pub fn uniqueness_check<T: Scalar>(spec: &ProblemSpec<T>, t: usize, tol: &Tolerances) -> Result<UniquenessReport> {
    let open = recursions::open_loop_backward(spec, t, tol)?;
    let feedback = recursions::feedback_backward(spec, t, tol)?;
    let mut open_solvable = true;
    let mut open_invertible = Vec::new();
    let mut feedback_positive = Vec::new();
    for k in t..spec.horizon {
        open_solvable &= linalg::is_psd(&open.op(k).oo, tol)?;
        open_invertible.push(linalg::is_invertible(&open.op(k).o, tol)?);
        feedback_positive.push(linalg::is_pd(&feedback.op(k).oo, tol)?);
    }
    let open_unique = open_solvable && open_invertible.iter().all(|&b| b);
    let feedback_unique = feedback_positive.iter().all(|&b| b);
    Ok(UniquenessReport {
        t,
        open_solvable,
        open_invertible,
        feedback_positive,
        open_unique: Verdict::from_bool(open_unique),
        feedback_unique: Verdict::from_bool(feedback_unique),
    })
}

/// Classifies existence and uniqueness of open-loop, feedback and (for a given
/// `Φ`, one gain per stage `0..N`) mixed solutions.
///
/// For the all-pairs scope the verdicts follow the operator identities at every
/// stage. For a fixed pair, failing identities leave the range condition on the
/// realized state; it is checked at the initial state exactly and along sampled
/// closed-loop paths, giving `no` on any violation and `state_dependent` otherwise.
pub fn classify_existence<T: Scalar>(
    spec: &ProblemSpec<T>,
    scope: &Scope,
    phi: Option<&[Mat<T>]>,
    sampling: &SamplingOptions,
    tol: &Tolerances,
) -> Result<ExistenceReport> {
    let (t, x) = match scope {
        Scope::AllPairs => (0, None),
        Scope::FixedPair { t, x } => {
            if *t >= spec.horizon {
                return Err(Error::Index(format!(
                    "start stage {t} is not before the horizon {}",
                    spec.horizon
                )));
            }
            if x.len() != spec.n {
                return Err(Error::Dimension {
                    context: "initial state".into(),
                    expected: format!("{}", spec.n),
                    got: format!("{}", x.len()),
                });
            }
            (*t, Some(Vector::from_iterator(x.len(), x.iter().map(|v| T::lit(*v)))))
        }
    };
    let open_t = recursions::open_loop_backward(spec, t, tol)?;
    let fb_t = recursions::feedback_backward(spec, t, tol)?;
    let open = family_report(spec, &open_t, x.as_ref(), sampling, tol)?;
    let feedback = family_report(spec, &fb_t, x.as_ref(), sampling, tol)?;
    let mixed = match phi {
        Some(phi) => {
            let tables = recursions::mixed_backward(spec, phi, t, tol)?;
            Some(family_report(spec, &tables, x.as_ref(), sampling, tol)?)
        }
        None => None,
    };
    let weights = assumption_h_check(spec, tol)?;
    let verdicts = Verdicts {
        open_exists: open.exists,
        feedback_exists: feedback.exists,
        mixed_exists_for_given_phi: mixed.as_ref().map(|m| m.exists),
        open_unique: open.unique,
        feedback_unique: feedback.unique,
        h_holds: Verdict::from_bool(weights.holds),
    };
    Ok(ExistenceReport {
        scope: scope.clone(),
        open,
        feedback,
        mixed,
        weights,
        verdicts,
    })
}
