//! Backward solvers for the mixed, open-loop and linear-feedback systems.
//!
//! All three share the `(k, l)` table layout: for every stage `k` the inner
//! recursion runs from `l = N` down to `l = k`, reading only gains fixed at
//! stages `l >= k + 1` before the stage-`k` operators are formed. The row at
//! `l = k` is filled in afterwards with the freshly computed stage-`k` gain.
//!
//! The open-loop and feedback solvers are written out independently of the
//! mixed one (rather than calling it with `Φ = 0` or `Φ = Φ̃`) so the
//! reduction identities between them are a real cross-check.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Tolerances};
use crate::model::{CompositeCoeffs, ProblemSpec, StageCoeffs};
use crate::scalar::{Mat, Scalar, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Mixed,
    Open,
    Feedback,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Mixed => "mixed",
            SolverKind::Open => "open",
            SolverKind::Feedback => "feedback",
        })
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(SolverKind::Mixed),
            "open" => Ok(SolverKind::Open),
            "feedback" => Ok(SolverKind::Feedback),
            _ => Err(Error::Schema(format!("unknown solver kind \"{s}\""))),
        }
    }
}

/// Table entries for one `(k, l)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T: Scalar> {
    pub s: Mat<T>,
    /// `𝒮 = S + S̄`
    pub s_cal: Mat<T>,
    pub t: Mat<T>,
    /// `𝒯 = T + T̄`
    pub t_cal: Mat<T>,
    pub u: Mat<T>,
    pub pi: Vector<T>,
}

/// All tables for a fixed stage `k`, indexed by `l - k` for `l = k..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row<T: Scalar> {
    pub k: usize,
    pub entries: Vec<Entry<T>>,
    /// `β_{k,l}` for `l = k..N-1`.
    pub beta: Vec<Mat<T>>,
}

impl<T: Scalar> Row<T> {
    pub fn at(&self, l: usize) -> &Entry<T> {
        &self.entries[l - self.k]
    }
}

/// Per-stage operators and the resulting policy pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOps<T: Scalar> {
    /// Convexity operator `𝕆_k` (symmetric).
    pub oo: Mat<T>,
    /// Stationarity operator `𝒪_k`; not symmetric in general.
    pub o: Mat<T>,
    pub l: Mat<T>,
    pub theta: Vector<T>,
    pub phi: Mat<T>,
    pub gamma: Mat<T>,
    /// Affine part `c_k = -𝒪_k^+ θ_k`.
    pub c: Vector<T>,
    /// `max |𝒪 - 𝒪^T|`, recorded instead of symmetrizing.
    pub o_asymmetry: f64,
    /// `σ_min / σ_max` of `𝒪_k`.
    pub o_singular_ratio: f64,
}

/// Output of a backward solve started at stage `t`.
#[derive(Debug, Clone)]
pub struct BackwardTables<T: Scalar> {
    pub kind: SolverKind,
    pub t: usize,
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    /// `rows[k - t]`
    pub rows: Vec<Row<T>>,
    /// `ops[k - t]`
    pub ops: Vec<StageOps<T>>,
    /// Formula conventions and numerical remarks attached to this run.
    pub notes: Vec<String>,
}

impl<T: Scalar> BackwardTables<T> {
    pub fn row(&self, k: usize) -> &Row<T> {
        &self.rows[k - self.t]
    }

    pub fn entry(&self, k: usize, l: usize) -> &Entry<T> {
        self.row(k).at(l)
    }

    pub fn op(&self, k: usize) -> &StageOps<T> {
        &self.ops[k - self.t]
    }

    pub fn stages(&self) -> std::ops::Range<usize> {
        self.t..self.horizon
    }

    /// The `Φ` used, one gain per stage from `t`.
    pub fn phi(&self) -> Vec<Mat<T>> {
        self.ops.iter().map(|o| o.phi.clone()).collect()
    }
}

pub const NOTE_U_TRANSPOSE: &str =
    "U recursion propagates with the transposed closed-loop factor: U[k,l] = (𝒜+ℬΦ)ᵀ U[k,l+1]";
pub const NOTE_TBAR_INDEX: &str = "the S factor inside the mean-field T̄ noise term is taken at index (k,l+1)";
pub const NOTE_THETA_HAT_INDEX: &str = "θ̂_k reads Ŝ at index (k,k+1)";
pub const NOTE_DELTA_WEIGHT: &str = "every noise sum in β̂ and in the T̂ coupling brace carries the weight δ_l^{ij}";
pub const NOTE_BRACES: &str =
    "𝒯 and π recursions group terms as in the fixed-initial-pair form (braces closed before the Γ factor)";
pub const NOTE_PI_TILDE_INDEX: &str = "π̃[k,l] uses 𝕆̃_l^+ θ̃_l at the inner index l";

/// `Σ_{i,j} δ^{ij} X_iᵀ M Y_j`
fn wsum<T: Scalar>(delta: &Mat<T>, xs: &[Mat<T>], mid: &Mat<T>, ys: &[Mat<T>]) -> Mat<T> {
    let mut out = Mat::zeros(xs[0].ncols(), ys[0].ncols());
    for (i, x) in xs.iter().enumerate() {
        let xm = x.tr_mul(mid);
        for (j, y) in ys.iter().enumerate() {
            let w = delta[(i, j)];
            if w != T::zero() {
                out += &xm * y * w;
            }
        }
    }
    out
}

/// `Σ_{i,j} δ^{ij} X_iᵀ M y_j`
fn wsum_v<T: Scalar>(delta: &Mat<T>, xs: &[Mat<T>], mid: &Mat<T>, ys: &[Vector<T>]) -> Vector<T> {
    let mut out = Vector::zeros(xs[0].ncols());
    for (i, x) in xs.iter().enumerate() {
        let xm = x.tr_mul(mid);
        for (j, y) in ys.iter().enumerate() {
            let w = delta[(i, j)];
            if w != T::zero() {
                out += &xm * y * w;
            }
        }
    }
    out
}

fn sym<T: Scalar>(m: Mat<T>) -> Mat<T> {
    (&m + m.transpose()) * T::lit(0.5)
}

fn finite_mat<T: Scalar>(m: &Mat<T>, what: impl FnOnce() -> String) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn finite_entry<T: Scalar>(e: &Entry<T>, k: usize, l: usize) -> Result<()> {
    for (name, m) in [("S", &e.s), ("𝒮", &e.s_cal), ("T", &e.t), ("𝒯", &e.t_cal), ("U", &e.u)] {
        finite_mat(m, || format!("{name}[{k},{l}]"))?;
    }
    if !e.pi.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(format!("π[{k},{l}]")));
    }
    Ok(())
}

fn terminal_entry<T: Scalar>(spec: &ProblemSpec<T>, k: usize) -> Entry<T> {
    let tm = spec.terminal(k);
    let n = spec.n;
    Entry {
        s: tm.weight.clone(),
        s_cal: &tm.weight + &tm.weight_bar,
        t: Mat::zeros(n, n),
        t_cal: Mat::zeros(n, n),
        u: tm.coupling.clone(),
        pi: tm.linear.clone(),
    }
}

fn check_spec<T: Scalar>(spec: &ProblemSpec<T>, t: usize, tol: &Tolerances) -> Result<()> {
    tol.validate()?;
    if t >= spec.horizon {
        return Err(Error::Index(format!("start stage {t} outside 0..{}", spec.horizon)));
    }
    Ok(())
}

fn check_phi<T: Scalar>(spec: &ProblemSpec<T>, phi: &[Mat<T>], t: usize) -> Result<()> {
    if phi.len() != spec.horizon {
        return Err(Error::Dimension {
            context: "Φ".into(),
            expected: format!("{} stage gains", spec.horizon),
            got: format!("{}", phi.len()),
        });
    }
    for (k, g) in phi.iter().enumerate().skip(t) {
        if g.shape() != (spec.m, spec.n) {
            return Err(Error::Dimension {
                context: format!("Φ[{k}]"),
                expected: format!("{}x{}", spec.m, spec.n),
                got: format!("{}x{}", g.nrows(), g.ncols()),
            });
        }
        finite_mat(g, || format!("Φ[{k}]"))?;
    }
    Ok(())
}

struct Ctx<'a, T: Scalar> {
    st: &'a StageCoeffs<T>,
    cc: CompositeCoeffs<T>,
    diag_st: &'a StageCoeffs<T>,
    diag: CompositeCoeffs<T>,
    delta: &'a Mat<T>,
}

fn ctx<T: Scalar>(spec: &ProblemSpec<T>, k: usize, l: usize) -> Ctx<'_, T> {
    let st = spec.stage(k, l);
    let diag_st = spec.stage(l, l);
    Ctx {
        st,
        cc: spec.composites_of(k, st),
        diag_st,
        diag: spec.composites_of(l, diag_st),
        delta: spec.delta(l),
    }
}

/// One inner step of the mixed system, given the stage-`l` gains.
fn mixed_step<T: Scalar>(
    spec: &ProblemSpec<T>,
    k: usize,
    l: usize,
    phi: &Mat<T>,
    gamma: &Mat<T>,
    vbar: &Vector<T>,
    nx: &Entry<T>,
) -> (Entry<T>, Mat<T>) {
    let Ctx {
        st,
        cc,
        diag_st,
        diag,
        delta,
    } = ctx(spec, k, l);
    let ab = &st.a + &st.b * phi;
    let cb: Vec<Mat<T>> = st.c.iter().zip(&st.d).map(|(c, d)| c + d * phi).collect();
    let acal = &cc.a + &cc.b * phi;
    let ccal: Vec<Mat<T>> = cc.c.iter().zip(&cc.d).map(|(c, d)| c + d * phi).collect();
    let k_gain = phi + gamma;
    let adiag = &diag.a + &diag.b * &k_gain;
    let cdiag: Vec<Mat<T>> = diag.c.iter().zip(&diag.d).map(|(c, d)| c + d * &k_gain).collect();
    let phit = phi.transpose();

    let s = sym(&st.q + &phit * &st.r * phi + ab.tr_mul(&nx.s) * &ab + wsum(delta, &cb, &nx.s, &cb));
    let s_cal = sym(&cc.q + &phit * &cc.r * phi + acal.tr_mul(&nx.s_cal) * &acal + wsum(delta, &ccal, &nx.s, &ccal));
    let t = (&phit * &st.r + ab.tr_mul(&nx.s) * &st.b + wsum(delta, &cb, &nx.s, &st.d)) * gamma
        + ab.tr_mul(&nx.t) * &adiag
        + wsum(delta, &cb, &nx.t, &cdiag);
    let t_cal = (&phit * &cc.r + acal.tr_mul(&nx.s_cal) * &cc.b + wsum(delta, &ccal, &nx.s, &cc.d)) * gamma
        + acal.tr_mul(&nx.t_cal) * &adiag
        + wsum(delta, &ccal, &nx.t, &cdiag);
    let u = acal.tr_mul(&nx.u);
    let beta = &phit * &cc.r
        + acal.transpose() * (&nx.s_cal * &cc.b + &nx.t_cal * &diag.b)
        + wsum(delta, &ccal, &nx.s, &cc.d)
        + wsum(delta, &ccal, &nx.t, &diag.d);
    let pi = &beta * vbar
        + acal.tr_mul(&(&nx.s_cal * &st.drift + &nx.pi))
        + acal.tr_mul(&nx.t_cal) * &diag_st.drift
        + wsum_v(delta, &ccal, &nx.s, &st.diffusion)
        + wsum_v(delta, &ccal, &nx.t, &diag_st.diffusion)
        + &phit * &st.lin_control
        + &st.lin_state;
    (
        Entry {
            s,
            s_cal,
            t,
            t_cal,
            u,
            pi,
        },
        beta,
    )
}

/// Stage-`k` operators of the mixed (and open-loop) system from the `(k, k+1)` tables.
fn mixed_ops<T: Scalar>(spec: &ProblemSpec<T>, k: usize, nx: &Entry<T>) -> (Mat<T>, Mat<T>, Mat<T>, Vector<T>) {
    let st = spec.stage(k, k);
    let cc = spec.composites_of(k, st);
    let delta = spec.delta(k);
    let st_sum = &nx.s_cal + &nx.t_cal;
    let s_sum = &nx.s + &nx.t;
    let oo = sym(&cc.r + cc.b.tr_mul(&nx.s_cal) * &cc.b + wsum(delta, &cc.d, &nx.s, &cc.d));
    let o = &cc.r + cc.b.tr_mul(&st_sum) * &cc.b + wsum(delta, &cc.d, &s_sum, &cc.d);
    let l = cc.b.tr_mul(&st_sum) * &cc.a + wsum(delta, &cc.d, &s_sum, &cc.c) + cc.b.tr_mul(&nx.u);
    let theta = cc.b.tr_mul(&st_sum) * &st.drift
        + wsum_v(delta, &cc.d, &s_sum, &st.diffusion)
        + cc.b.tr_mul(&nx.pi)
        + &st.lin_control;
    (oo, o, l, theta)
}

fn assemble<T: Scalar>(spec: &ProblemSpec<T>, k: usize, mut entries: Vec<Entry<T>>, mut beta: Vec<Mat<T>>) -> Row<T> {
    // Built from l = N downwards.
    entries.reverse();
    beta.reverse();
    debug_assert_eq!(entries.len(), spec.horizon - k + 1);
    Row { k, entries, beta }
}

fn stage_ops<T: Scalar>(
    oo: Mat<T>,
    o: Mat<T>,
    l: Mat<T>,
    theta: Vector<T>,
    phi: Mat<T>,
    gamma: Mat<T>,
    c: Vector<T>,
) -> Result<StageOps<T>> {
    let o_asymmetry = linalg::asymmetry(&o).as_f64();
    let o_singular_ratio = linalg::singular_ratio(&o)?.as_f64();
    Ok(StageOps {
        oo,
        o,
        l,
        theta,
        phi,
        gamma,
        c,
        o_asymmetry,
        o_singular_ratio,
    })
}

fn singular_note<T: Scalar>(notes: &mut Vec<String>, k: usize, ops: &StageOps<T>, tol: &Tolerances, name: &str) {
    if ops.o_singular_ratio <= tol.invert_rtol {
        notes.push(format!(
            "{name}_{k} is numerically singular (σ_min/σ_max = {:.3e}); the pseudoinverse is applied",
            ops.o_singular_ratio
        ));
    }
}

/// Mixed solver for a given pure-feedback part `Φ` (one `m x n` gain per stage `0..N`;
/// entries before `t` are ignored).
pub fn mixed_backward<T: Scalar>(
    spec: &ProblemSpec<T>,
    phi: &[Mat<T>],
    t: usize,
    tol: &Tolerances,
) -> Result<BackwardTables<T>> {
    check_spec(spec, t, tol)?;
    check_phi(spec, phi, t)?;
    let horizon = spec.horizon;
    let mut rows: Vec<Option<Row<T>>> = vec![None; horizon];
    let mut ops: Vec<Option<StageOps<T>>> = vec![None; horizon];
    let mut notes = vec![
        NOTE_U_TRANSPOSE.to_string(),
        NOTE_TBAR_INDEX.to_string(),
        NOTE_BRACES.to_string(),
    ];
    for k in (t..horizon).rev() {
        let mut entries = vec![terminal_entry(spec, k)];
        let mut beta = Vec::new();
        for l in (k + 1..horizon).rev() {
            let op = ops[l].as_ref().expect("later stage solved");
            let (e, b) = mixed_step(spec, k, l, &phi[l], &op.gamma, &op.c, entries.last().unwrap());
            finite_entry(&e, k, l)?;
            entries.push(e);
            beta.push(b);
        }
        let (oo, o, l_op, theta) = mixed_ops(spec, k, entries.last().unwrap());
        finite_mat(&o, || format!("𝒪[{k}]"))?;
        let o_pinv = linalg::pinv(&o, tol)?;
        let gamma = -(&o_pinv * &l_op) - &phi[k];
        let c = -(&o_pinv * &theta);
        let (e, b) = mixed_step(spec, k, k, &phi[k], &gamma, &c, entries.last().unwrap());
        finite_entry(&e, k, k)?;
        entries.push(e);
        beta.push(b);
        let op = stage_ops(oo, o, l_op, theta, phi[k].clone(), gamma, c)?;
        singular_note(&mut notes, k, &op, tol, "𝒪");
        ops[k] = Some(op);
        rows[k] = Some(assemble(spec, k, entries, beta));
    }
    Ok(finish(SolverKind::Mixed, spec, t, rows, ops, notes))
}

fn finish<T: Scalar>(
    kind: SolverKind,
    spec: &ProblemSpec<T>,
    t: usize,
    rows: Vec<Option<Row<T>>>,
    ops: Vec<Option<StageOps<T>>>,
    notes: Vec<String>,
) -> BackwardTables<T> {
    BackwardTables {
        kind,
        t,
        horizon: spec.horizon,
        n: spec.n,
        m: spec.m,
        rows: rows.into_iter().skip(t).map(|r| r.expect("row solved")).collect(),
        ops: ops.into_iter().skip(t).map(|o| o.expect("stage solved")).collect(),
        notes,
    }
}

/// One inner step of the open-loop (hatted) system. `khat = 𝒪̂_l^+ ℒ̂_l`, `what = 𝒪̂_l^+ θ̂_l`.
fn open_step<T: Scalar>(
    spec: &ProblemSpec<T>,
    k: usize,
    l: usize,
    khat: &Mat<T>,
    what: &Vector<T>,
    nx: &Entry<T>,
) -> (Entry<T>, Mat<T>) {
    let Ctx {
        st,
        cc,
        diag_st,
        diag,
        delta,
    } = ctx(spec, k, l);
    let s = sym(&st.q + st.a.tr_mul(&nx.s) * &st.a + wsum(delta, &st.c, &nx.s, &st.c));
    let s_cal = sym(&cc.q + cc.a.tr_mul(&nx.s_cal) * &cc.a + wsum(delta, &cc.c, &nx.s, &cc.c));
    let brace = st.a.tr_mul(&nx.s) * &st.b
        + st.a.tr_mul(&nx.t) * &diag.b
        + wsum(delta, &st.c, &nx.s, &st.d)
        + wsum(delta, &st.c, &nx.t, &diag.d);
    let t = st.a.tr_mul(&nx.t) * &diag.a + wsum(delta, &st.c, &nx.t, &diag.c) - brace * khat;
    let brace_cal = cc.a.tr_mul(&nx.s_cal) * &cc.b
        + cc.a.tr_mul(&nx.t_cal) * &diag.b
        + wsum(delta, &cc.c, &nx.s, &cc.d)
        + wsum(delta, &cc.c, &nx.t, &diag.d);
    let t_cal = cc.a.tr_mul(&nx.t_cal) * &diag.a + wsum(delta, &cc.c, &nx.t, &diag.c) - brace_cal * khat;
    let u = cc.a.tr_mul(&nx.u);
    let beta = cc.a.transpose() * (&nx.s_cal * &cc.b + &nx.t_cal * &diag.b)
        + wsum(delta, &cc.c, &nx.s, &cc.d)
        + wsum(delta, &cc.c, &nx.t, &diag.d);
    let pi = -(&beta * what)
        + cc.a.tr_mul(&(&nx.s_cal * &st.drift + &nx.pi))
        + cc.a.tr_mul(&nx.t_cal) * &diag_st.drift
        + wsum_v(delta, &cc.c, &nx.s, &st.diffusion)
        + wsum_v(delta, &cc.c, &nx.t, &diag_st.diffusion)
        + &st.lin_state;
    (
        Entry {
            s,
            s_cal,
            t,
            t_cal,
            u,
            pi,
        },
        beta,
    )
}

/// Open-loop solver: no pure-feedback part, the whole control is the open-loop part.
pub fn open_loop_backward<T: Scalar>(spec: &ProblemSpec<T>, t: usize, tol: &Tolerances) -> Result<BackwardTables<T>> {
    check_spec(spec, t, tol)?;
    let (n, m, horizon) = (spec.n, spec.m, spec.horizon);
    let mut rows: Vec<Option<Row<T>>> = vec![None; horizon];
    let mut ops: Vec<Option<StageOps<T>>> = vec![None; horizon];
    // (𝒪̂^+ ℒ̂, 𝒪̂^+ θ̂) per stage
    let mut solved: Vec<Option<(Mat<T>, Vector<T>)>> = vec![None; horizon];
    let mut notes = vec![
        NOTE_U_TRANSPOSE.to_string(),
        NOTE_THETA_HAT_INDEX.to_string(),
        NOTE_DELTA_WEIGHT.to_string(),
    ];
    for k in (t..horizon).rev() {
        let mut entries = vec![terminal_entry(spec, k)];
        let mut beta = Vec::new();
        for l in (k + 1..horizon).rev() {
            let (khat, what) = solved[l].as_ref().expect("later stage solved");
            let (e, b) = open_step(spec, k, l, khat, what, entries.last().unwrap());
            finite_entry(&e, k, l)?;
            entries.push(e);
            beta.push(b);
        }
        let nx = entries.last().unwrap();
        let st = spec.stage(k, k);
        let cc = spec.composites_of(k, st);
        let delta = spec.delta(k);
        let oo = sym(&cc.r + cc.b.tr_mul(&nx.s_cal) * &cc.b + wsum(delta, &cc.d, &nx.s, &cc.d));
        let o = &cc.r
            + cc.b.tr_mul(&nx.s_cal) * &cc.b
            + cc.b.tr_mul(&nx.t_cal) * &cc.b
            + wsum(delta, &cc.d, &nx.s, &cc.d)
            + wsum(delta, &cc.d, &nx.t, &cc.d);
        let l_op = cc.b.tr_mul(&nx.s_cal) * &cc.a
            + cc.b.tr_mul(&nx.t_cal) * &cc.a
            + wsum(delta, &cc.d, &nx.s, &cc.c)
            + wsum(delta, &cc.d, &nx.t, &cc.c)
            + cc.b.tr_mul(&nx.u);
        let theta = cc.b.tr_mul(&nx.s_cal) * &st.drift
            + cc.b.tr_mul(&nx.t_cal) * &st.drift
            + wsum_v(delta, &cc.d, &nx.s, &st.diffusion)
            + wsum_v(delta, &cc.d, &nx.t, &st.diffusion)
            + cc.b.tr_mul(&nx.pi)
            + &st.lin_control;
        finite_mat(&o, || format!("𝒪̂[{k}]"))?;
        let o_pinv = linalg::pinv(&o, tol)?;
        let khat = &o_pinv * &l_op;
        let what = &o_pinv * &theta;
        let (e, b) = open_step(spec, k, k, &khat, &what, nx);
        finite_entry(&e, k, k)?;
        entries.push(e);
        beta.push(b);
        let op = stage_ops(oo, o, l_op, theta, Mat::zeros(m, n), -&khat, -&what)?;
        singular_note(&mut notes, k, &op, tol, "𝒪̂");
        ops[k] = Some(op);
        solved[k] = Some((khat, what));
        rows[k] = Some(assemble(spec, k, entries, beta));
    }
    Ok(finish(SolverKind::Open, spec, t, rows, ops, notes))
}

/// One inner step of the feedback (tilded) system, written in the expanded
/// form with `P = 𝕆̃_l^+ 𝕃̃_l` and `w = 𝕆̃_l^+ θ̃_l`.
fn feedback_step<T: Scalar>(
    spec: &ProblemSpec<T>,
    k: usize,
    l: usize,
    p: &Mat<T>,
    w: &Vector<T>,
    nx: &Entry<T>,
) -> (Entry<T>, Mat<T>) {
    let st = spec.stage(k, l);
    let cc = spec.composites_of(k, st);
    let delta = spec.delta(l);
    let pt = p.transpose();

    let cross = st.a.tr_mul(&nx.s) * &st.b + wsum(delta, &st.c, &nx.s, &st.d);
    let quad = &st.r + st.b.tr_mul(&nx.s) * &st.b + wsum(delta, &st.d, &nx.s, &st.d);
    let s = sym(&st.q + st.a.tr_mul(&nx.s) * &st.a + wsum(delta, &st.c, &nx.s, &st.c)
        - &cross * p
        - &pt * cross.transpose()
        + &pt * quad * p);
    let cross_cal = cc.a.tr_mul(&nx.s_cal) * &cc.b + wsum(delta, &cc.c, &nx.s, &cc.d);
    let quad_cal = &cc.r + cc.b.tr_mul(&nx.s_cal) * &cc.b + wsum(delta, &cc.d, &nx.s, &cc.d);
    let s_cal = sym(
        &cc.q + cc.a.tr_mul(&nx.s_cal) * &cc.a + wsum(delta, &cc.c, &nx.s, &cc.c)
            - &cross_cal * p
            - &pt * cross_cal.transpose()
            + &pt * quad_cal * p,
    );
    let acl = &cc.a - &cc.b * p;
    let ccl: Vec<Mat<T>> = cc.c.iter().zip(&cc.d).map(|(c, d)| c - d * p).collect();
    let u = acl.tr_mul(&nx.u);
    let beta = -(&pt * &cc.r) + acl.tr_mul(&nx.s_cal) * &cc.b + wsum(delta, &ccl, &nx.s, &cc.d);
    let pi = -(&beta * w) + acl.tr_mul(&(&nx.s_cal * &st.drift + &nx.pi)) + wsum_v(delta, &ccl, &nx.s, &st.diffusion)
        - &pt * &st.lin_control
        + &st.lin_state;
    let n = spec.n;
    (
        Entry {
            s,
            s_cal,
            t: Mat::zeros(n, n),
            t_cal: Mat::zeros(n, n),
            u,
            pi,
        },
        beta,
    )
}

/// Linear-feedback solver: builds `Φ̃` stage by stage with `Γ ≡ 0`.
/// In the returned tables `oo` and `o` both hold `𝕆̃_k`, `l` holds `𝕃̃_k`,
/// `phi` holds `Φ̃_k` and `c` holds `ṽ_k`.
pub fn feedback_backward<T: Scalar>(spec: &ProblemSpec<T>, t: usize, tol: &Tolerances) -> Result<BackwardTables<T>> {
    check_spec(spec, t, tol)?;
    let (n, m, horizon) = (spec.n, spec.m, spec.horizon);
    let mut rows: Vec<Option<Row<T>>> = vec![None; horizon];
    let mut ops: Vec<Option<StageOps<T>>> = vec![None; horizon];
    let mut solved: Vec<Option<(Mat<T>, Vector<T>)>> = vec![None; horizon];
    let mut notes = vec![NOTE_U_TRANSPOSE.to_string(), NOTE_PI_TILDE_INDEX.to_string()];
    for k in (t..horizon).rev() {
        let mut entries = vec![terminal_entry(spec, k)];
        let mut beta = Vec::new();
        for l in (k + 1..horizon).rev() {
            let (p, w) = solved[l].as_ref().expect("later stage solved");
            let (e, b) = feedback_step(spec, k, l, p, w, entries.last().unwrap());
            finite_entry(&e, k, l)?;
            entries.push(e);
            beta.push(b);
        }
        let nx = entries.last().unwrap();
        let st = spec.stage(k, k);
        let cc = spec.composites_of(k, st);
        let delta = spec.delta(k);
        let oo = sym(&cc.r + cc.b.tr_mul(&nx.s_cal) * &cc.b + wsum(delta, &cc.d, &nx.s, &cc.d));
        let ll = cc.b.tr_mul(&nx.s_cal) * &cc.a + wsum(delta, &cc.d, &nx.s, &cc.c) + cc.b.tr_mul(&nx.u);
        let theta = cc.b.tr_mul(&nx.s_cal) * &st.drift
            + wsum_v(delta, &cc.d, &nx.s, &st.diffusion)
            + cc.b.tr_mul(&nx.pi)
            + &st.lin_control;
        finite_mat(&oo, || format!("𝕆̃[{k}]"))?;
        let oo_pinv = linalg::pinv(&oo, tol)?;
        let p = &oo_pinv * &ll;
        let w = &oo_pinv * &theta;
        let (e, b) = feedback_step(spec, k, k, &p, &w, nx);
        finite_entry(&e, k, k)?;
        entries.push(e);
        beta.push(b);
        let op = stage_ops(oo.clone(), oo, ll, theta, -&p, Mat::zeros(m, n), -&w)?;
        singular_note(&mut notes, k, &op, tol, "𝕆̃");
        ops[k] = Some(op);
        solved[k] = Some((p, w));
        rows[k] = Some(assemble(spec, k, entries, beta));
    }
    Ok(finish(SolverKind::Feedback, spec, t, rows, ops, notes))
}

/// Zero gains for every stage, the `Φ` that reduces the mixed solver to the open-loop one.
pub fn zero_phi<T: Scalar>(spec: &ProblemSpec<T>) -> Vec<Mat<T>> {
    vec![Mat::zeros(spec.m, spec.n); spec.horizon]
}

/// Pads a gain list that starts at stage `t` to the full horizon with zeros.
pub fn full_phi<T: Scalar>(spec: &ProblemSpec<T>, t: usize, from_t: &[Mat<T>]) -> Vec<Mat<T>> {
    let mut out = zero_phi(spec);
    for (i, g) in from_t.iter().enumerate() {
        out[t + i] = g.clone();
    }
    out
}

/// Closed forms of the stage-`(N-1)` operators, read straight off the terminal data.
pub fn last_stage_operators<T: Scalar>(spec: &ProblemSpec<T>) -> (Mat<T>, Mat<T>, Mat<T>, Vector<T>) {
    let k = spec.horizon - 1;
    let st = spec.stage(k, k);
    let cc = spec.composites_of(k, st);
    let tm = spec.terminal(k);
    let delta = spec.delta(k);
    let oo = &cc.r + cc.b.transpose() * &cc.g * &cc.b + wsum(delta, &cc.d, &tm.weight, &cc.d);
    // T vanishes at the terminal index, so 𝒪 and 𝕆 coincide here.
    let o = oo.clone();
    let l = cc.b.transpose() * &cc.g * &cc.a + wsum(delta, &cc.d, &tm.weight, &cc.c) + cc.b.transpose() * &tm.coupling;
    let theta = cc.b.transpose() * (&cc.g * &st.drift + &tm.linear)
        + wsum_v(delta, &cc.d, &tm.weight, &st.diffusion)
        + &st.lin_control;
    (oo, o, l, theta)
}
