use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mixeq::equilibrium::{policy_from_document, EquilibriumPolicy};
use mixeq::linalg::{eigenvalues_sym, singular_values};
use mixeq::model::{load_problem, ProblemSpec};
use mixeq::recursions::{full_phi, StageOps};
use mixeq::{Matrix, Problem, Tolerances, Vec64};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const REPORT_SCHEMA: &str = "mixeq-report/1";

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Exit {
    Ok = 0,
    Failure = 1,
    Input = 2,
    Nonexistent = 3,
    Resource = 4,
    Mismatch = 5,
}

/// Bad user input that is not a problem-document error: unreadable files,
/// conflicting flags, wrong vector lengths.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

pub fn exit_for(err: &anyhow::Error) -> Exit {
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<serde_json::Error>() {
            return Exit::Input;
        }
        if let Some(e) = cause.downcast_ref::<mixeq::Error>() {
            return match e {
                mixeq::Error::DepthExceeded { .. } => Exit::Resource,
                mixeq::Error::Decomposition(_) | mixeq::Error::NotSquare { .. } => Exit::Failure,
                _ => Exit::Input,
            };
        }
    }
    Exit::Failure
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))
}

fn read_json(path: &Path) -> Result<Value> {
    let bytes = read_input(path)?;
    serde_json::from_slice(&bytes).map_err(|e| input_error(format!("{}: invalid JSON: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A loaded problem together with where it came from.
pub struct ProblemInput {
    pub spec: Problem,
    pub source: String,
    pub sha256: String,
}

impl ProblemInput {
    pub fn from_file(path: &Path, tol: &Tolerances) -> Result<Self> {
        let bytes = read_input(path)?;
        let text =
            String::from_utf8(bytes.clone()).map_err(|_| input_error(format!("{} is not UTF-8", path.display())))?;
        let spec = load_problem(&text, tol).with_context(|| format!("loading {}", path.display()))?;
        Ok(Self {
            spec,
            source: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }

    /// The fingerprint of a built-in problem hashes its serialized document.
    pub fn builtin(name: &str, spec: Problem) -> Self {
        let bytes = serde_json::to_vec(&spec.to_document()).expect("problem document serializes");
        Self {
            spec,
            source: format!("builtin:{name}"),
            sha256: sha256_hex(&bytes),
        }
    }

    pub fn describe(&self) -> Value {
        json!({
            "source": self.source,
            "sha256": self.sha256,
            "n": self.spec.n,
            "m": self.spec.m,
            "p": self.spec.p,
            "N": self.spec.horizon,
            "max_weight_asymmetry": self.spec.max_asymmetry,
        })
    }

    pub fn check_stage(&self, t: usize) -> Result<()> {
        if t >= self.spec.horizon {
            return Err(input_error(format!(
                "--t {t} must be below the horizon N = {}",
                self.spec.horizon
            )));
        }
        Ok(())
    }

    pub fn state(&self, x: &[f64]) -> Result<Vec64> {
        if x.len() != self.spec.n {
            return Err(input_error(format!(
                "--x has {} entries, the state dimension is {}",
                x.len(),
                self.spec.n
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(input_error("--x must be finite"));
        }
        Ok(Vec64::from_column_slice(x))
    }
}

fn read_gain(v: &Value, m: usize, n: usize, what: &str) -> Result<Matrix> {
    let bad = || input_error(format!("{what}: expected a {m}x{n} array of rows"));
    let rows = v.as_array().ok_or_else(bad)?;
    if rows.len() != m {
        return Err(bad());
    }
    let mut out = Matrix::zeros(m, n);
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_array().filter(|r| r.len() == n).ok_or_else(bad)?;
        for (j, x) in row.iter().enumerate() {
            out[(i, j)] = x.as_f64().filter(|v| v.is_finite()).ok_or_else(bad)?;
        }
    }
    Ok(out)
}

/// Reads a gain file: `{"Phi": [...]}` or a bare array of stage gains, listing
/// either all `N` stages or the `N - t` stages from `t`. Returns all `N` stages.
pub fn load_phi(path: &Path, spec: &ProblemSpec<f64>, t: usize) -> Result<Vec<Matrix>> {
    let doc = read_json(path)?;
    let list = match &doc {
        Value::Array(a) => a,
        Value::Object(o) => o
            .get("Phi")
            .and_then(Value::as_array)
            .ok_or_else(|| input_error(format!("{}: expected a \"Phi\" array", path.display())))?,
        _ => {
            return Err(input_error(format!(
                "{}: expected an object or an array",
                path.display()
            )))
        }
    };
    let horizon = spec.horizon;
    let gains = list
        .iter()
        .enumerate()
        .map(|(i, v)| read_gain(v, spec.m, spec.n, &format!("{} stage {i}", path.display())))
        .collect::<Result<Vec<_>>>()?;
    if gains.len() == horizon {
        Ok(gains)
    } else if gains.len() == horizon - t {
        Ok(full_phi(spec, t, &gains))
    } else {
        Err(input_error(format!(
            "{}: {} stages listed, expected {horizon} or {}",
            path.display(),
            gains.len(),
            horizon - t
        )))
    }
}

pub fn load_policy(path: &Path, spec: &ProblemSpec<f64>) -> Result<EquilibriumPolicy<f64>> {
    let doc = read_json(path)?;
    policy_from_document(&doc, spec).with_context(|| format!("loading {}", path.display()))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp =
        tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("creating a file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn rows(m: &Matrix) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| json!(m.row(i).iter().copied().collect::<Vec<f64>>()))
            .collect(),
    )
}

pub fn column(v: &Vec64) -> Value {
    json!(v.as_slice())
}

/// Spectral summary of the stage-`k` operators.
pub fn stage_summary(k: usize, op: &StageOps<f64>) -> Result<Value> {
    Ok(json!({
        "k": k,
        "OO": rows(&op.oo),
        "OO_eigenvalues": column(&eigenvalues_sym(&op.oo)?),
        "O": rows(&op.o),
        "O_singular_values": column(&singular_values(&op.o)?),
        "O_singular_ratio": op.o_singular_ratio,
        "O_asymmetry": op.o_asymmetry,
        "L_singular_values": column(&singular_values(&op.l)?),
        "theta": column(&op.theta),
    }))
}

/// The single document a run produces.
pub struct Report {
    command: &'static str,
    parameters: Value,
    tolerances: Tolerances,
    problem: Option<Value>,
    started: Instant,
}

impl Report {
    pub fn new(command: &'static str, parameters: &impl Serialize, tolerances: Tolerances) -> Self {
        Self {
            command,
            parameters: serde_json::to_value(parameters).expect("arguments serialize"),
            tolerances,
            problem: None,
            started: Instant::now(),
        }
    }

    pub fn problem(&mut self, input: &ProblemInput) {
        self.problem = Some(input.describe());
    }

    pub fn finish(&self, result: Value, exit: Exit, timing: bool) -> Value {
        let mut doc = json!({
            "schema": REPORT_SCHEMA,
            "tool": {"name": "mixeq", "version": env!("CARGO_PKG_VERSION")},
            "command": self.command,
            "parameters": self.parameters,
            "tolerances": self.tolerances,
            "problem": self.problem,
            "result": result,
            "exit_code": exit as i32,
        });
        if timing {
            doc["timing"] = json!({"elapsed_ms": self.started.elapsed().as_secs_f64() * 1e3});
        }
        doc
    }
}
