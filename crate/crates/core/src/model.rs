//! Problem data: dynamics, cost weights and noise moments indexed by the
//! (initial stage, stage) pair, plus the JSON problem document.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, Tolerances};
use crate::scalar::{Mat, Scalar, Vector};

/// Largest asymmetry tolerated in a declared-symmetric weight before the loader rejects it.
pub const SYMMETRY_LIMIT: f64 = 1e-9;

/// Coefficients attached to one `(t, k)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCoeffs<T: Scalar> {
    pub a: Mat<T>,
    pub a_bar: Mat<T>,
    pub b: Mat<T>,
    pub b_bar: Mat<T>,
    pub c: Vec<Mat<T>>,
    pub c_bar: Vec<Mat<T>>,
    pub d: Vec<Mat<T>>,
    pub d_bar: Vec<Mat<T>>,
    /// Deterministic drift `f`.
    pub drift: Vector<T>,
    /// Per-channel diffusion offsets `d^i`.
    pub diffusion: Vec<Vector<T>>,
    pub q: Mat<T>,
    pub q_bar: Mat<T>,
    pub r: Mat<T>,
    pub r_bar: Mat<T>,
    /// Linear state weight `q`.
    pub lin_state: Vector<T>,
    /// Linear control weight `rho`.
    pub lin_control: Vector<T>,
}

impl<T: Scalar> StageCoeffs<T> {
    pub fn zeros(n: usize, m: usize, p: usize) -> Self {
        Self {
            a: Mat::zeros(n, n),
            a_bar: Mat::zeros(n, n),
            b: Mat::zeros(n, m),
            b_bar: Mat::zeros(n, m),
            c: vec![Mat::zeros(n, n); p],
            c_bar: vec![Mat::zeros(n, n); p],
            d: vec![Mat::zeros(n, m); p],
            d_bar: vec![Mat::zeros(n, m); p],
            drift: Vector::zeros(n),
            diffusion: vec![Vector::zeros(n); p],
            q: Mat::zeros(n, n),
            q_bar: Mat::zeros(n, n),
            r: Mat::zeros(m, m),
            r_bar: Mat::zeros(m, m),
            lin_state: Vector::zeros(n),
            lin_control: Vector::zeros(m),
        }
    }

    fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> StageCoeffs<U> {
        let mm = |x: &Mat<T>| x.map(f);
        let mv = |x: &Vector<T>| x.map(f);
        StageCoeffs {
            a: mm(&self.a),
            a_bar: mm(&self.a_bar),
            b: mm(&self.b),
            b_bar: mm(&self.b_bar),
            c: self.c.iter().map(mm).collect(),
            c_bar: self.c_bar.iter().map(mm).collect(),
            d: self.d.iter().map(mm).collect(),
            d_bar: self.d_bar.iter().map(mm).collect(),
            drift: mv(&self.drift),
            diffusion: self.diffusion.iter().map(mv).collect(),
            q: mm(&self.q),
            q_bar: mm(&self.q_bar),
            r: mm(&self.r),
            r_bar: mm(&self.r_bar),
            lin_state: mv(&self.lin_state),
            lin_control: mv(&self.lin_control),
        }
    }
}

/// Terminal data attached to an initial stage `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminal<T: Scalar> {
    /// `G_t`
    pub weight: Mat<T>,
    /// `Ḡ_t`
    pub weight_bar: Mat<T>,
    /// `F_t`, couples the initial state to the terminal mean.
    pub coupling: Mat<T>,
    /// `g_t`
    pub linear: Vector<T>,
}

impl<T: Scalar> Terminal<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            weight: Mat::zeros(n, n),
            weight_bar: Mat::zeros(n, n),
            coupling: Mat::zeros(n, n),
            linear: Vector::zeros(n),
        }
    }
}

/// Sums of each coefficient with its mean-field counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeCoeffs<T: Scalar> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub c: Vec<Mat<T>>,
    pub d: Vec<Mat<T>>,
    pub q: Mat<T>,
    pub r: Mat<T>,
    /// `G_t + Ḡ_t`
    pub g: Mat<T>,
}

/// A fully specified problem over stages `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec<T: Scalar> {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub horizon: usize,
    /// `rows[t][k - t]` holds the `(t, k)` coefficients.
    rows: Vec<Vec<StageCoeffs<T>>>,
    terminal: Vec<Terminal<T>>,
    delta: Vec<Mat<T>>,
    /// Largest asymmetry removed from a symmetric weight while loading.
    pub max_asymmetry: f64,
}

impl<T: Scalar> ProblemSpec<T> {
    /// All-zero problem with unit noise covariance.
    pub fn zeros(n: usize, m: usize, p: usize, horizon: usize) -> Self {
        Self {
            n,
            m,
            p,
            horizon,
            rows: (0..horizon)
                .map(|t| vec![StageCoeffs::zeros(n, m, p); horizon - t])
                .collect(),
            terminal: vec![Terminal::zeros(n); horizon],
            delta: vec![Mat::identity(p, p); horizon],
            max_asymmetry: 0.0,
        }
    }

    fn check_pair(&self, t: usize, k: usize) -> Result<()> {
        if t > k || k >= self.horizon {
            return Err(Error::Index(format!(
                "pair ({t},{k}) outside 0 <= t <= k < {}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Coefficients of the `(t, k)` pair. Panics on an invalid pair; see [`Self::try_stage`].
    pub fn stage(&self, t: usize, k: usize) -> &StageCoeffs<T> {
        &self.rows[t][k - t]
    }

    pub fn try_stage(&self, t: usize, k: usize) -> Result<&StageCoeffs<T>> {
        self.check_pair(t, k)?;
        Ok(self.stage(t, k))
    }

    pub fn stage_mut(&mut self, t: usize, k: usize) -> &mut StageCoeffs<T> {
        &mut self.rows[t][k - t]
    }

    pub fn terminal(&self, t: usize) -> &Terminal<T> {
        &self.terminal[t]
    }

    pub fn terminal_mut(&mut self, t: usize) -> &mut Terminal<T> {
        &mut self.terminal[t]
    }

    /// Noise second-moment matrix `Δ_k`.
    pub fn delta(&self, k: usize) -> &Mat<T> {
        &self.delta[k]
    }

    pub fn set_delta(&mut self, k: usize, delta: Mat<T>) {
        self.delta[k] = delta;
    }

    /// Applies `f` to every `(t, k)` stage, for building test problems.
    pub fn for_each_stage(&mut self, mut f: impl FnMut(usize, usize, &mut StageCoeffs<T>)) {
        for (t, row) in self.rows.iter_mut().enumerate() {
            for (j, st) in row.iter_mut().enumerate() {
                f(t, t + j, st);
            }
        }
    }

    pub fn composites(&self, t: usize, k: usize) -> Result<CompositeCoeffs<T>> {
        let st = self.try_stage(t, k)?;
        Ok(self.composites_of(t, st))
    }

    pub(crate) fn composites_of(&self, t: usize, st: &StageCoeffs<T>) -> CompositeCoeffs<T> {
        let term = &self.terminal[t];
        CompositeCoeffs {
            a: &st.a + &st.a_bar,
            b: &st.b + &st.b_bar,
            c: st.c.iter().zip(&st.c_bar).map(|(x, y)| x + y).collect(),
            d: st.d.iter().zip(&st.d_bar).map(|(x, y)| x + y).collect(),
            q: &st.q + &st.q_bar,
            r: &st.r + &st.r_bar,
            g: &term.weight + &term.weight_bar,
        }
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ProblemSpec<U> {
        let f = |x: T| U::lit(x.as_f64());
        ProblemSpec {
            n: self.n,
            m: self.m,
            p: self.p,
            horizon: self.horizon,
            rows: self
                .rows
                .iter()
                .map(|row| row.iter().map(|st| st.map(&f)).collect())
                .collect(),
            terminal: self
                .terminal
                .iter()
                .map(|tm| Terminal {
                    weight: tm.weight.map(f),
                    weight_bar: tm.weight_bar.map(f),
                    coupling: tm.coupling.map(f),
                    linear: tm.linear.map(f),
                })
                .collect(),
            delta: self.delta.iter().map(|d| d.map(f)).collect(),
            max_asymmetry: self.max_asymmetry,
        }
    }

    /// True when `f`, `d`, `q`, `rho`, `g` and `F` all vanish.
    pub fn is_homogeneous(&self) -> bool {
        let zero_v = |v: &Vector<T>| v.iter().all(|x| *x == T::zero());
        self.rows.iter().flatten().all(|st| {
            zero_v(&st.drift) && st.diffusion.iter().all(zero_v) && zero_v(&st.lin_state) && zero_v(&st.lin_control)
        }) && self
            .terminal
            .iter()
            .all(|tm| zero_v(&tm.linear) && tm.coupling.iter().all(|x| *x == T::zero()))
    }

    /// Checks dimensions, finiteness, symmetry and noise semidefiniteness.
    pub fn validate(&self, tol: &Tolerances) -> Result<()> {
        let (n, m, p) = (self.n, self.m, self.p);
        if n == 0 || m == 0 || p == 0 || self.horizon == 0 {
            return Err(Error::Schema("n, m, p and N must all be positive".into()));
        }
        let dim = |what: String, x: &Mat<T>, r: usize, c: usize| -> Result<()> {
            if x.shape() != (r, c) {
                return Err(Error::Dimension {
                    context: what,
                    expected: format!("{r}x{c}"),
                    got: format!("{}x{}", x.nrows(), x.ncols()),
                });
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(what));
            }
            Ok(())
        };
        let dimv = |what: String, x: &Vector<T>, r: usize| -> Result<()> {
            if x.len() != r {
                return Err(Error::Dimension {
                    context: what,
                    expected: format!("{r}"),
                    got: format!("{}", x.len()),
                });
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(what));
            }
            Ok(())
        };
        let sym = |family: &str, idx: String, x: &Mat<T>| -> Result<()> {
            let asym = linalg::asymmetry(x).as_f64();
            if asym > SYMMETRY_LIMIT {
                return Err(Error::Asymmetric {
                    family: family.into(),
                    index: idx,
                    asymmetry: asym,
                });
            }
            Ok(())
        };
        for t in 0..self.horizon {
            if self.rows[t].len() != self.horizon - t {
                return Err(Error::Schema(format!("row {t} has wrong length")));
            }
            for k in t..self.horizon {
                let st = self.stage(t, k);
                let at = |f: &str| format!("{f}[{t},{k}]");
                dim(at("A"), &st.a, n, n)?;
                dim(at("Abar"), &st.a_bar, n, n)?;
                dim(at("B"), &st.b, n, m)?;
                dim(at("Bbar"), &st.b_bar, n, m)?;
                for (name, fam, c) in [
                    ("C", &st.c, n),
                    ("Cbar", &st.c_bar, n),
                    ("D", &st.d, m),
                    ("Dbar", &st.d_bar, m),
                ] {
                    if fam.len() != p {
                        return Err(Error::Dimension {
                            context: at(name),
                            expected: format!("{p} channels"),
                            got: format!("{}", fam.len()),
                        });
                    }
                    for (i, x) in fam.iter().enumerate() {
                        dim(format!("{name}{i}[{t},{k}]"), x, n, c)?;
                    }
                }
                dimv(at("f"), &st.drift, n)?;
                if st.diffusion.len() != p {
                    return Err(Error::Dimension {
                        context: at("d"),
                        expected: format!("{p} channels"),
                        got: format!("{}", st.diffusion.len()),
                    });
                }
                for (i, x) in st.diffusion.iter().enumerate() {
                    dimv(format!("d{i}[{t},{k}]"), x, n)?;
                }
                dim(at("Q"), &st.q, n, n)?;
                dim(at("Qbar"), &st.q_bar, n, n)?;
                dim(at("R"), &st.r, m, m)?;
                dim(at("Rbar"), &st.r_bar, m, m)?;
                dimv(at("q"), &st.lin_state, n)?;
                dimv(at("rho"), &st.lin_control, m)?;
                sym("Q", format!("{t},{k}"), &st.q)?;
                sym("Qbar", format!("{t},{k}"), &st.q_bar)?;
                sym("R", format!("{t},{k}"), &st.r)?;
                sym("Rbar", format!("{t},{k}"), &st.r_bar)?;
            }
            let tm = &self.terminal[t];
            dim(format!("G[{t}]"), &tm.weight, n, n)?;
            dim(format!("Gbar[{t}]"), &tm.weight_bar, n, n)?;
            dim(format!("F[{t}]"), &tm.coupling, n, n)?;
            dimv(format!("g[{t}]"), &tm.linear, n)?;
            sym("G", t.to_string(), &tm.weight)?;
            sym("Gbar", t.to_string(), &tm.weight_bar)?;
        }
        for (k, d) in self.delta.iter().enumerate() {
            dim(format!("delta[{k}]"), d, p, p)?;
            sym("delta", k.to_string(), d)?;
            let (lam, ok) = linalg::psd_margin(d, tol)?;
            if !ok {
                return Err(Error::NoiseNotPsd {
                    stage: k,
                    min_eig: lam.as_f64(),
                });
            }
        }
        Ok(())
    }

    /// Replaces every declared-symmetric weight by its symmetric part and
    /// returns the largest asymmetry removed.
    fn symmetrize_weights(&mut self) -> f64 {
        let mut worst = 0.0f64;
        let mut fix = |x: &mut Mat<T>| {
            worst = worst.max(linalg::asymmetry(x).as_f64());
            *x = (&*x + x.transpose()) * T::lit(0.5);
        };
        for st in self.rows.iter_mut().flatten() {
            fix(&mut st.q);
            fix(&mut st.q_bar);
            fix(&mut st.r);
            fix(&mut st.r_bar);
        }
        for tm in &mut self.terminal {
            fix(&mut tm.weight);
            fix(&mut tm.weight_bar);
        }
        for d in &mut self.delta {
            fix(d);
        }
        worst
    }

    /// Serializes to the problem document in the explicit `"t,k"` keyed form.
    pub fn to_document(&self) -> Value {
        let mat = |x: &Mat<T>| -> Value {
            Value::Array(
                (0..x.nrows())
                    .map(|i| Value::Array((0..x.ncols()).map(|j| json!(x[(i, j)].as_f64())).collect()))
                    .collect(),
            )
        };
        let vecv = |x: &Vector<T>| -> Value { Value::Array(x.iter().map(|v| json!(v.as_f64())).collect()) };
        let keyed = |get: &dyn Fn(&StageCoeffs<T>) -> Value| -> Value {
            let mut obj = Map::new();
            for t in 0..self.horizon {
                for k in t..self.horizon {
                    obj.insert(format!("{t},{k}"), get(self.stage(t, k)));
                }
            }
            Value::Object(obj)
        };
        let channels = |get: &dyn Fn(&StageCoeffs<T>, usize) -> Value| -> Value {
            Value::Array((0..self.p).map(|i| keyed(&|st| get(st, i))).collect())
        };
        let mut mats = Map::new();
        mats.insert("A".into(), keyed(&|s| mat(&s.a)));
        mats.insert("Abar".into(), keyed(&|s| mat(&s.a_bar)));
        mats.insert("B".into(), keyed(&|s| mat(&s.b)));
        mats.insert("Bbar".into(), keyed(&|s| mat(&s.b_bar)));
        mats.insert("C".into(), channels(&|s, i| mat(&s.c[i])));
        mats.insert("Cbar".into(), channels(&|s, i| mat(&s.c_bar[i])));
        mats.insert("D".into(), channels(&|s, i| mat(&s.d[i])));
        mats.insert("Dbar".into(), channels(&|s, i| mat(&s.d_bar[i])));
        mats.insert("f".into(), keyed(&|s| vecv(&s.drift)));
        mats.insert("d".into(), channels(&|s, i| vecv(&s.diffusion[i])));
        mats.insert("Q".into(), keyed(&|s| mat(&s.q)));
        mats.insert("Qbar".into(), keyed(&|s| mat(&s.q_bar)));
        mats.insert("R".into(), keyed(&|s| mat(&s.r)));
        mats.insert("Rbar".into(), keyed(&|s| mat(&s.r_bar)));
        mats.insert("q".into(), keyed(&|s| vecv(&s.lin_state)));
        mats.insert("rho".into(), keyed(&|s| vecv(&s.lin_control)));
        mats.insert(
            "G".into(),
            Value::Array(self.terminal.iter().map(|x| mat(&x.weight)).collect()),
        );
        mats.insert(
            "Gbar".into(),
            Value::Array(self.terminal.iter().map(|x| mat(&x.weight_bar)).collect()),
        );
        mats.insert(
            "F".into(),
            Value::Array(self.terminal.iter().map(|x| mat(&x.coupling)).collect()),
        );
        mats.insert(
            "g".into(),
            Value::Array(self.terminal.iter().map(|x| vecv(&x.linear)).collect()),
        );
        json!({
            "n": self.n,
            "m": self.m,
            "p": self.p,
            "N": self.horizon,
            "stationary_in_t": false,
            "matrices": Value::Object(mats),
            "noise": { "delta": Value::Array(self.delta.iter().map(mat).collect()) },
        })
    }
}

const TK_FAMILIES: [&str; 11] = ["A", "Abar", "B", "Bbar", "f", "Q", "Qbar", "R", "Rbar", "q", "rho"];
const CHANNEL_FAMILIES: [&str; 5] = ["C", "Cbar", "D", "Dbar", "d"];
const TERMINAL_FAMILIES: [&str; 4] = ["G", "Gbar", "F", "g"];

#[derive(Clone, Copy)]
enum Shape {
    Mat(usize, usize),
    Vec(usize),
}

fn parse_number(v: &Value, ctx: &str) -> Result<f64> {
    let x = v
        .as_f64()
        .ok_or_else(|| Error::Schema(format!("{ctx}: expected a number, got {v}")))?;
    if !x.is_finite() {
        return Err(Error::NonFinite(ctx.to_string()));
    }
    Ok(x)
}

/// A matrix is an array of row arrays; a 1x1 matrix may also be a bare number.
fn parse_matrix(v: &Value, rows: usize, cols: usize, ctx: &str) -> Result<Mat<f64>> {
    if rows == 1 && cols == 1 && v.is_number() {
        return Ok(DMatrix::from_element(1, 1, parse_number(v, ctx)?));
    }
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Schema(format!("{ctx}: expected a {rows}x{cols} matrix")))?;
    if arr.len() != rows {
        return Err(Error::Dimension {
            context: ctx.to_string(),
            expected: format!("{rows} rows"),
            got: format!("{} rows", arr.len()),
        });
    }
    let mut out = DMatrix::zeros(rows, cols);
    for (i, row) in arr.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| Error::Schema(format!("{ctx}: row {i} is not an array")))?;
        if row.len() != cols {
            return Err(Error::Dimension {
                context: format!("{ctx} row {i}"),
                expected: format!("{cols} columns"),
                got: format!("{} columns", row.len()),
            });
        }
        for (j, x) in row.iter().enumerate() {
            out[(i, j)] = parse_number(x, ctx)?;
        }
    }
    Ok(out)
}

fn parse_vector(v: &Value, len: usize, ctx: &str) -> Result<Vector<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Schema(format!("{ctx}: expected a vector of length {len}")))?;
    if arr.len() != len {
        return Err(Error::Dimension {
            context: ctx.to_string(),
            expected: format!("length {len}"),
            got: format!("length {}", arr.len()),
        });
    }
    arr.iter()
        .map(|x| parse_number(x, ctx))
        .collect::<Result<Vec<_>>>()
        .map(Vector::from_vec)
}

enum Entry {
    M(Mat<f64>),
    V(Vector<f64>),
}

fn parse_entry(v: &Value, shape: Shape, ctx: &str) -> Result<Entry> {
    match shape {
        Shape::Mat(r, c) => parse_matrix(v, r, c, ctx).map(Entry::M),
        Shape::Vec(r) => parse_vector(v, r, ctx).map(Entry::V),
    }
}

/// Reads a `(t, k)` family: an array over `k` (stationary in `t`) or a map keyed `"t,k"`.
fn parse_tk_family(
    v: &Value,
    shape: Shape,
    horizon: usize,
    stationary: bool,
    family: &str,
) -> Result<BTreeMap<(usize, usize), Entry>> {
    let mut out = BTreeMap::new();
    match v {
        Value::Array(items) => {
            if !stationary {
                return Err(Error::Schema(format!(
                    "{family}: stage-indexed arrays require stationary_in_t = true; use \"t,k\" keys"
                )));
            }
            if items.len() != horizon {
                return Err(Error::Dimension {
                    context: family.to_string(),
                    expected: format!("{horizon} stages"),
                    got: format!("{} stages", items.len()),
                });
            }
            for (k, item) in items.iter().enumerate() {
                let e = parse_entry(item, shape, &format!("{family}[{k}]"))?;
                for t in 0..=k {
                    let copy = match &e {
                        Entry::M(x) => Entry::M(x.clone()),
                        Entry::V(x) => Entry::V(x.clone()),
                    };
                    out.insert((t, k), copy);
                }
            }
        }
        Value::Object(obj) => {
            for (key, item) in obj {
                let (t, k) = parse_key(key, family)?;
                if t > k || k >= horizon {
                    return Err(Error::Index(format!("{family}: key \"{key}\" outside the horizon")));
                }
                out.insert((t, k), parse_entry(item, shape, &format!("{family}[{key}]"))?);
            }
            for t in 0..horizon {
                for k in t..horizon {
                    if !out.contains_key(&(t, k)) {
                        return Err(Error::MissingEntry {
                            family: family.to_string(),
                            t,
                            k,
                        });
                    }
                }
            }
        }
        _ => {
            return Err(Error::Schema(format!(
                "{family}: expected an array over stages or an object keyed \"t,k\""
            )))
        }
    }
    Ok(out)
}

fn parse_key(key: &str, family: &str) -> Result<(usize, usize)> {
    let bad = || Error::Schema(format!("{family}: malformed key \"{key}\", expected \"t,k\""));
    let (a, b) = key.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

fn parse_stage_list(v: &Value, shape: Shape, horizon: usize, family: &str) -> Result<Vec<Entry>> {
    let items = v
        .as_array()
        .ok_or_else(|| Error::Schema(format!("{family}: expected an array of length {horizon}")))?;
    if items.len() != horizon {
        return Err(Error::Dimension {
            context: family.to_string(),
            expected: format!("{horizon} entries"),
            got: format!("{} entries", items.len()),
        });
    }
    items
        .iter()
        .enumerate()
        .map(|(i, x)| parse_entry(x, shape, &format!("{family}[{i}]")))
        .collect()
}

fn usize_field(doc: &Value, key: &str) -> Result<usize> {
    doc.get(key)
        .and_then(Value::as_u64)
        .map(|x| x as usize)
        .ok_or_else(|| Error::Schema(format!("missing or non-integer field \"{key}\"")))
}

fn take_m(e: Entry) -> Mat<f64> {
    match e {
        Entry::M(x) => x,
        Entry::V(_) => unreachable!("shape fixed by caller"),
    }
}

fn take_v(e: Entry) -> Vector<f64> {
    match e {
        Entry::V(x) => x,
        Entry::M(_) => unreachable!("shape fixed by caller"),
    }
}

/// Parses and validates a problem document.
pub fn load_problem(text: &str, tol: &Tolerances) -> Result<ProblemSpec<f64>> {
    let doc: Value = serde_json::from_str(text)?;
    problem_from_value(&doc, tol)
}

pub fn problem_from_value(doc: &Value, tol: &Tolerances) -> Result<ProblemSpec<f64>> {
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Schema("problem document must be a JSON object".into()))?;
    for key in obj.keys() {
        if ![
            "n",
            "m",
            "p",
            "N",
            "stationary_in_t",
            "matrices",
            "noise",
            "description",
        ]
        .contains(&key.as_str())
        {
            return Err(Error::Schema(format!("unknown top-level field \"{key}\"")));
        }
    }
    let n = usize_field(doc, "n")?;
    let m = usize_field(doc, "m")?;
    let p = usize_field(doc, "p")?;
    let horizon = usize_field(doc, "N")?;
    if n == 0 || m == 0 || p == 0 || horizon == 0 {
        return Err(Error::Schema("n, m, p and N must all be positive".into()));
    }
    let stationary = match doc.get("stationary_in_t") {
        None => false,
        Some(v) => v
            .as_bool()
            .ok_or_else(|| Error::Schema("stationary_in_t must be a boolean".into()))?,
    };
    let empty = Map::new();
    let mats = match doc.get("matrices") {
        None => &empty,
        Some(v) => v
            .as_object()
            .ok_or_else(|| Error::Schema("\"matrices\" must be an object".into()))?,
    };
    for key in mats.keys() {
        let known = TK_FAMILIES.contains(&key.as_str())
            || CHANNEL_FAMILIES.contains(&key.as_str())
            || TERMINAL_FAMILIES.contains(&key.as_str());
        if !known {
            return Err(Error::Schema(format!("unknown matrix family \"{key}\"")));
        }
    }

    let mut spec = ProblemSpec::<f64>::zeros(n, m, p, horizon);
    for fam in TK_FAMILIES {
        let Some(v) = mats.get(fam) else { continue };
        let shape = match fam {
            "A" | "Abar" | "Q" | "Qbar" => Shape::Mat(n, n),
            "B" | "Bbar" => Shape::Mat(n, m),
            "R" | "Rbar" => Shape::Mat(m, m),
            "f" | "q" => Shape::Vec(n),
            _ => Shape::Vec(m),
        };
        for ((t, k), e) in parse_tk_family(v, shape, horizon, stationary, fam)? {
            let st = spec.stage_mut(t, k);
            match fam {
                "A" => st.a = take_m(e),
                "Abar" => st.a_bar = take_m(e),
                "B" => st.b = take_m(e),
                "Bbar" => st.b_bar = take_m(e),
                "Q" => st.q = take_m(e),
                "Qbar" => st.q_bar = take_m(e),
                "R" => st.r = take_m(e),
                "Rbar" => st.r_bar = take_m(e),
                "f" => st.drift = take_v(e),
                "q" => st.lin_state = take_v(e),
                _ => st.lin_control = take_v(e),
            }
        }
    }
    for fam in CHANNEL_FAMILIES {
        let Some(v) = mats.get(fam) else { continue };
        let per_channel = v
            .as_array()
            .ok_or_else(|| Error::Schema(format!("{fam}: expected an array with one family per noise channel")))?;
        if per_channel.len() != p {
            return Err(Error::Dimension {
                context: fam.to_string(),
                expected: format!("{p} channels"),
                got: format!("{} channels", per_channel.len()),
            });
        }
        let shape = match fam {
            "C" | "Cbar" => Shape::Mat(n, n),
            "D" | "Dbar" => Shape::Mat(n, m),
            _ => Shape::Vec(n),
        };
        for (i, chv) in per_channel.iter().enumerate() {
            let name = format!("{fam}{i}");
            for ((t, k), e) in parse_tk_family(chv, shape, horizon, stationary, &name)? {
                let st = spec.stage_mut(t, k);
                match fam {
                    "C" => st.c[i] = take_m(e),
                    "Cbar" => st.c_bar[i] = take_m(e),
                    "D" => st.d[i] = take_m(e),
                    "Dbar" => st.d_bar[i] = take_m(e),
                    _ => st.diffusion[i] = take_v(e),
                }
            }
        }
    }
    for fam in TERMINAL_FAMILIES {
        let Some(v) = mats.get(fam) else { continue };
        let shape = if fam == "g" { Shape::Vec(n) } else { Shape::Mat(n, n) };
        for (t, e) in parse_stage_list(v, shape, horizon, fam)?.into_iter().enumerate() {
            let tm = spec.terminal_mut(t);
            match fam {
                "G" => tm.weight = take_m(e),
                "Gbar" => tm.weight_bar = take_m(e),
                "F" => tm.coupling = take_m(e),
                _ => tm.linear = take_v(e),
            }
        }
    }
    if let Some(noise) = doc.get("noise") {
        let nobj = noise
            .as_object()
            .ok_or_else(|| Error::Schema("\"noise\" must be an object".into()))?;
        for key in nobj.keys() {
            if key != "delta" {
                return Err(Error::Schema(format!("unknown noise field \"{key}\"")));
            }
        }
        if let Some(dv) = nobj.get("delta") {
            for (k, e) in parse_stage_list(dv, Shape::Mat(p, p), horizon, "delta")?
                .into_iter()
                .enumerate()
            {
                spec.set_delta(k, take_m(e));
            }
        }
    }

    // Reject before symmetrizing so the offending family is reported.
    spec.validate(tol)?;
    spec.max_asymmetry = spec.symmetrize_weights();
    Ok(spec)
}

fn col(v: &[f64]) -> Mat<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// The two-dimensional four-stage example with indefinite weights used
/// throughout the test suite.
pub fn builtin_example() -> ProblemSpec<f64> {
    let (n, m, p, horizon) = (2, 1, 1, 4);
    let a = [
        [1.0, 0.4, 0.3, 2.0],
        [1.102, -0.24, 0.53, 1.89],
        [1.89, 0.49, 0.0, 1.75],
        [0.8, -0.4, 0.2, 0.7],
    ];
    let b = [[1.2, -0.5], [1.0, 1.0], [1.2, 0.2], [1.0, 0.3]];
    let d = [[1.0, 0.3], [1.0, 0.4], [0.45, 0.25], [0.52, 0.0]];
    let q = [
        [3.0, 0.5, 0.5, -2.0],
        [2.0, -0.65, -0.65, 0.0],
        [0.5, 0.5, 0.5, -2.0],
        [-0.1, 0.0, 0.0, -0.75],
    ];
    let r = [0.0, -2.5, 1.0, -0.5];
    let mut spec = ProblemSpec::zeros(n, m, p, horizon);
    spec.for_each_stage(|_, k, st| {
        st.a = DMatrix::from_row_slice(2, 2, &a[k]);
        st.b = col(&b[k]);
        st.d[0] = col(&d[k]);
        st.q = DMatrix::from_row_slice(2, 2, &q[k]);
        st.r = DMatrix::from_element(1, 1, r[k]);
    });
    for t in 0..horizon {
        let tm = spec.terminal_mut(t);
        tm.weight = DMatrix::from_row_slice(2, 2, &[1.0, -0.1, -0.1, 1.0]);
        tm.weight_bar = DMatrix::from_diagonal_element(2, 2, -0.3);
    }
    spec
}

/// Knobs for [`random_spec`].
#[derive(Debug, Clone, Copy)]
pub struct RandomSpecOptions {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub horizon: usize,
    /// Entry scale for system matrices.
    pub scale: f64,
    /// Include nonzero mean-field (barred) coefficients.
    pub mean_field: bool,
    /// Include nonzero `f`, `d`, `q`, `rho`, `g`, `F`.
    pub affine: bool,
    /// Build weights as Gram matrices so the nonnegativity assumption holds.
    pub nonnegative_weights: bool,
    /// Let coefficients depend on the initial stage as well as the stage.
    pub depends_on_t: bool,
}

impl RandomSpecOptions {
    pub fn new(n: usize, m: usize, p: usize, horizon: usize) -> Self {
        Self {
            n,
            m,
            p,
            horizon,
            scale: 0.5,
            mean_field: true,
            affine: true,
            nonnegative_weights: false,
            depends_on_t: true,
        }
    }
}

fn randn<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize, s: f64) -> Mat<f64> {
    DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

fn rand_sym<R: Rng + ?Sized>(rng: &mut R, n: usize, s: f64) -> Mat<f64> {
    let x = randn(rng, n, n, s);
    (&x + x.transpose()) * 0.5
}

/// Gram matrix `X X^T`, plus `shift * I`.
fn rand_gram<R: Rng + ?Sized>(rng: &mut R, n: usize, s: f64, shift: f64) -> Mat<f64> {
    let x = randn(rng, n, n, s);
    &x * x.transpose() + DMatrix::identity(n, n) * shift
}

fn rand_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, s: f64) -> Vector<f64> {
    Vector::from_fn(n, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

/// Standard normal gains `Φ_k` for every stage, from the ChaCha stream `index` under `seed`.
pub fn sample_phi(spec: &ProblemSpec<f64>, seed: u64, index: u64) -> Vec<Mat<f64>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..spec.horizon)
        .map(|_| randn(&mut rng, spec.m, spec.n, 1.0))
        .collect()
}

/// Samples a random problem with Gaussian entries.
pub fn random_spec<R: Rng + ?Sized>(rng: &mut R, opts: &RandomSpecOptions) -> ProblemSpec<f64> {
    let RandomSpecOptions {
        n,
        m,
        p,
        horizon,
        scale: s,
        ..
    } = *opts;
    let mut spec = ProblemSpec::zeros(n, m, p, horizon);
    let fresh = |rng: &mut R| {
        let mut st = StageCoeffs::zeros(n, m, p);
        st.a = DMatrix::identity(n, n) * 0.5 + randn(rng, n, n, s);
        st.b = randn(rng, n, m, s);
        for i in 0..p {
            st.c[i] = randn(rng, n, n, s);
            st.d[i] = randn(rng, n, m, s);
        }
        if opts.mean_field {
            st.a_bar = randn(rng, n, n, s * 0.5);
            st.b_bar = randn(rng, n, m, s * 0.5);
            for i in 0..p {
                st.c_bar[i] = randn(rng, n, n, s * 0.5);
                st.d_bar[i] = randn(rng, n, m, s * 0.5);
            }
        }
        if opts.nonnegative_weights {
            st.q = rand_gram(rng, n, 0.6, 0.0);
            st.r = rand_gram(rng, m, 0.6, 0.1);
            if opts.mean_field {
                // Q̄ = Gram - Q/2 keeps both Q and Q + Q̄ nonnegative.
                st.q_bar = rand_gram(rng, n, 0.4, 0.0) - &st.q * 0.5;
                st.r_bar = rand_gram(rng, m, 0.4, 0.0) - &st.r * 0.5;
            }
        } else {
            st.q = rand_sym(rng, n, 1.0);
            st.r = rand_sym(rng, m, 1.0) + DMatrix::identity(m, m) * 0.5;
            if opts.mean_field {
                st.q_bar = rand_sym(rng, n, 0.5);
                st.r_bar = rand_sym(rng, m, 0.5);
            }
        }
        if opts.affine {
            st.drift = rand_vec(rng, n, s);
            for i in 0..p {
                st.diffusion[i] = rand_vec(rng, n, s);
            }
            st.lin_state = rand_vec(rng, n, s);
            st.lin_control = rand_vec(rng, m, s);
        }
        st
    };
    let mut by_k: Vec<Option<StageCoeffs<f64>>> = vec![None; horizon];
    for t in 0..horizon {
        for k in t..horizon {
            let st = if opts.depends_on_t || by_k[k].is_none() {
                let st = fresh(rng);
                by_k[k] = Some(st.clone());
                st
            } else {
                by_k[k].clone().unwrap()
            };
            *spec.stage_mut(t, k) = st;
        }
    }
    for t in 0..horizon {
        let tm = spec.terminal_mut(t);
        if opts.nonnegative_weights {
            tm.weight = rand_gram(rng, n, 0.6, 0.0);
            if opts.mean_field {
                tm.weight_bar = rand_gram(rng, n, 0.4, 0.0) - &tm.weight * 0.5;
            }
        } else {
            tm.weight = rand_sym(rng, n, 1.0);
            if opts.mean_field {
                tm.weight_bar = rand_sym(rng, n, 0.5);
            }
        }
        if opts.affine {
            tm.coupling = randn(rng, n, n, s);
            tm.linear = rand_vec(rng, n, s);
        }
    }
    for k in 0..horizon {
        let x = randn(rng, p, p, 0.7);
        spec.set_delta(k, &x * x.transpose() + DMatrix::identity(p, p) * 0.2);
    }
    spec
}
