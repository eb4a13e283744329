//! JSON run configuration and model loading.
//!
//! `model` is either a preset (`iwp`, `iwp-default`, `rip`) or the path of a
//! JSON model file whose matrix entries and potentials are expressions in
//! the grammar of [`crate::expr`]:
//!
//! ```json
//! {
//!   "name": "cart-pole",
//!   "mass": [["2", "cos(q1)"], ["cos(q1)", "1"]],
//!   "potential": "cos(q1)",
//!   "input_map": [["0"], ["1"]],
//!   "desired_mass": [["1", "0"], ["0", "1"]],
//!   "desired_potential": "1 - cos(q1) + 0.5*q2*q2",
//!   "j2": [["0", "p1"], ["-p1", "0"]],
//!   "q_star": [0, 0],
//!   "gains": { "kp": [[1]], "kv": [[1]], "ki": [[1]] }
//! }
//! ```
//!
//! `j2` entries may use `q` and `p`; all other entries only `q`. Matrices whose
//! entries are all numeric are flagged constant, so their derivatives are
//! exactly zero.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, Expr};
use crate::models::{build_rip, Iwp, IwpParams, IwpTermOptions, Rip, RipFields};
use crate::sim::{Controller, Method, DEFAULT_DT, DEFAULT_HORIZON};
use crate::system::{
    constant_matrix, ControllerGains, Matrix, MatrixField, MechanicalModel, PhaseMatrixField, TargetDesign, Vector,
};

pub const DEFAULT_CHECK_SAMPLES: usize = 1000;
pub const DEFAULT_ISS_PAIRS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Pass,
    Fail,
}

impl std::str::FromStr for Expect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pass" | "matchable" => Ok(Expect::Pass),
            "fail" | "fail-to-match" => Ok(Expect::Fail),
            _ => Err(Error::Parse(format!("expectation must be `pass` or `fail`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// Classical matching residual.
    Basic,
    P41,
    P51,
    /// The built-in example's own right-hand side (IWP or RIP).
    Example,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Basic, Operator::P41, Operator::P51, Operator::Example];

    pub fn as_str(&self) -> &'static str {
        match self {
            Operator::Basic => "basic",
            Operator::P41 => "p41",
            Operator::P51 => "p51",
            Operator::Example => "example",
        }
    }
}

impl std::str::FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Operator::ALL
            .into_iter()
            .find(|o| o.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown operator `{s}` (basic, p41, p51, example)")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Restriction {
    #[default]
    None,
    /// Sample only the slice `x_v = 0`.
    XvZero,
}

impl std::str::FromStr for Restriction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace(' ', "").as_str() {
            "x_v=0" | "xv=0" => Ok(Restriction::XvZero),
            "none" | "" => Ok(Restriction::None),
            _ => Err(Error::Parse(format!("unsupported restriction `{s}` (only `x_v=0`)"))),
        }
    }
}

impl TryFrom<String> for Restriction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Restriction> for String {
    fn from(r: Restriction) -> Self {
        match r {
            Restriction::None => "none".into(),
            Restriction::XvZero => "x_v=0".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopKind {
    #[default]
    Target,
    Disturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub loop_kind: LoopKind,
    pub controller: Controller,
    pub method: Method,
    pub horizon: f64,
    pub dt: f64,
    /// Defaults to `q* + 0.2` in every coordinate.
    pub q0: Option<Vec<f64>>,
    pub p0: Option<Vec<f64>>,
    pub x_v0: Option<Vec<f64>>,
    /// One time expression per coordinate.
    pub d1: Option<Vec<String>>,
    pub d2: Option<Vec<String>>,
    /// One time expression per input.
    pub d2hat: Option<Vec<String>>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            loop_kind: LoopKind::Target,
            controller: Controller::IdaPbc,
            method: Method::Rk4,
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
            q0: None,
            p0: None,
            x_v0: None,
            d1: None,
            d2: None,
            d2hat: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IssConfig {
    /// Random `(q, x_p, d̂2)` triples for the pointwise matched-bound check.
    pub pairs: usize,
    pub horizon: f64,
    pub dt: f64,
    /// `d̂2 = amplitude · sin t` in every input channel.
    pub amplitude: f64,
}

impl Default for IssConfig {
    fn default() -> Self {
        Self {
            pairs: DEFAULT_ISS_PAIRS,
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
            amplitude: 0.1,
        }
    }
}

/// RIP design fields as expressions in `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RipSpec {
    pub delta: String,
    pub delta_d: String,
    pub sigma: String,
    pub gamma: String,
    pub epsilon: String,
    pub m3: String,
    /// Entries `B1, B2, B3` of `∂Md⁻¹/∂q1`; finite differences when absent.
    pub b: Option<[String; 3]>,
    pub j2: f64,
    pub kv: f64,
    pub ki: f64,
}

impl Default for RipSpec {
    fn default() -> Self {
        Self {
            delta: "1".into(),
            delta_d: "1".into(),
            sigma: "0.5".into(),
            gamma: "1".into(),
            epsilon: "2".into(),
            m3: "2".into(),
            b: Some(["0".into(), "-sin(q1)*(cos(q1)+1)".into(), "-sin(q1)".into()]),
            j2: 1.0,
            kv: 1.0,
            ki: 1.0,
        }
    }
}

impl RipSpec {
    pub fn fields(&self) -> Result<RipFields> {
        let f = |s: &str| expr::scalar_field(s, 2);
        Ok(RipFields {
            delta: f(&self.delta)?,
            delta_d: f(&self.delta_d)?,
            sigma: f(&self.sigma)?,
            gamma: f(&self.gamma)?,
            epsilon: f(&self.epsilon)?,
            m3: f(&self.m3)?,
            b: match &self.b {
                Some([a, b, c]) => Some([f(a)?, f(b)?, f(c)?]),
                None => None,
            },
            j2: self.j2,
            kv: self.kv,
            ki: self.ki,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    pub kp: Vec<Vec<f64>>,
    pub kv: Vec<Vec<f64>>,
    pub ki: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModelSpec {
    pub name: String,
    pub mass: Vec<Vec<String>>,
    pub potential: String,
    pub input_map: Vec<Vec<String>>,
    pub desired_mass: Vec<Vec<String>>,
    pub desired_potential: String,
    pub j2: Option<Vec<Vec<String>>>,
    pub q_star: Vec<f64>,
    pub gains: GainSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    /// Overrides for the IWP presets.
    pub iwp: Option<IwpParams>,
    pub rip: Option<RipSpec>,
    /// `"identity"` replaces `G` with `I_n` (and the gains with scaled identities).
    pub input_map: Option<String>,
    pub seed: u64,
    pub samples: usize,
    pub tolerance: f64,
    pub expect: Option<Expect>,
    pub restrict: Restriction,
    /// Empty selects every operator applicable to the model.
    pub operators: Vec<Operator>,
    pub out: Option<PathBuf>,
    pub term_options: IwpTermOptions,
    pub simulation: SimulationConfig,
    pub iss: IssConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "iwp".into(),
            iwp: None,
            rip: None,
            input_map: None,
            seed: 0,
            samples: DEFAULT_CHECK_SAMPLES,
            tolerance: crate::idapbc::FEASIBILITY_TOLERANCE,
            expect: None,
            restrict: Restriction::None,
            operators: vec![],
            out: None,
            term_options: IwpTermOptions::default(),
            simulation: SimulationConfig::default(),
            iss: IssConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Parse(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.samples == 0 {
            return Err(Error::Parse("samples must be positive".into()));
        }
        for (what, v) in [
            ("simulation.dt", self.simulation.dt),
            ("simulation.horizon", self.simulation.horizon),
            ("iss.dt", self.iss.dt),
            ("iss.horizon", self.iss.horizon),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Parse(format!("{what} must be positive, got {v}")));
            }
        }
        if let Some(m) = &self.input_map {
            if m != "identity" {
                return Err(Error::Parse(format!(
                    "input_map override must be `identity`, got `{m}`"
                )));
            }
        }
        Ok(())
    }
}

pub enum Example {
    Iwp(Iwp),
    Rip(Rip),
    None,
}

/// A loaded model with its design and gains.
pub struct ModelBundle {
    pub name: String,
    pub model: MechanicalModel,
    pub target: TargetDesign,
    pub gains: ControllerGains,
    pub example: Example,
    /// Human-readable caveats (placeholder parameters, overrides).
    pub notes: Vec<String>,
}

fn matrix_entries(rows: &[Vec<String>], n: usize, cols: usize, what: &str) -> Result<Vec<Vec<Expr>>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse(format!("{what} must be {n} x {cols}")));
    }
    rows.iter()
        .map(|r| r.iter().map(|s| Expr::parse(s)).collect())
        .collect()
}

fn is_constant(entries: &[Vec<Expr>]) -> bool {
    entries
        .iter()
        .flatten()
        .all(|e| e.max_indices() == (0, 0) && !e.uses_time())
}

fn check_q_only(entries: &[Vec<Expr>], n: usize, what: &str) -> Result<()> {
    for e in entries.iter().flatten() {
        let (nq, np) = e.max_indices();
        if np > 0 || e.uses_time() || nq > n {
            return Err(Error::Parse(format!("{what} entries may only use q1..q{n}")));
        }
    }
    Ok(())
}

fn matrix_field(entries: Vec<Vec<Expr>>) -> MatrixField {
    let (r, c) = (entries.len(), entries[0].len());
    Arc::new(move |q: &Vector| Matrix::from_fn(r, c, |i, j| entries[i][j].eval(q.as_slice(), &[], 0.0)))
}

fn gain_matrix(rows: &[Vec<f64>], m: usize, what: &str) -> Result<Matrix> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Parse(format!("gain {what} must be {m} x {m}")));
    }
    Ok(Matrix::from_fn(m, m, |i, j| rows[i][j]))
}

impl CustomModelSpec {
    pub fn build(&self) -> Result<ModelBundle> {
        let n = self.q_star.len();
        if n == 0 {
            return Err(Error::Parse("q_star must be nonempty".into()));
        }
        let m = self.input_map.first().map_or(0, |r| r.len());
        let mass = matrix_entries(&self.mass, n, n, "mass")?;
        let g = matrix_entries(&self.input_map, n, m, "input_map")?;
        let md = matrix_entries(&self.desired_mass, n, n, "desired_mass")?;
        for (e, what) in [(&mass, "mass"), (&g, "input_map"), (&md, "desired_mass")] {
            check_q_only(e, n, what)?;
        }
        let (mass_const, md_const) = (is_constant(&mass), is_constant(&md));
        let mut model = MechanicalModel::new(
            &self.name,
            n,
            m,
            matrix_field(mass),
            expr::scalar_field(&self.potential, n)?,
            matrix_field(g),
        )?;
        if mass_const {
            model = model.with_constant_mass();
        }
        let j2: PhaseMatrixField = match &self.j2 {
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Parse(format!("j2 must be {n} x {n}")));
                }
                let fields = rows
                    .iter()
                    .map(|r| r.iter().map(|s| expr::phase_field(s, n)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                Arc::new(move |q: &Vector, p: &Vector| Matrix::from_fn(n, n, |i, j| fields[i][j](q, p)))
            }
            None => crate::system::zero_j2(n),
        };
        let mut target = TargetDesign::new(
            matrix_field(md),
            expr::scalar_field(&self.desired_potential, n)?,
            j2,
            Vector::from_vec(self.q_star.clone()),
        )?;
        if md_const {
            target = target.with_constant_desired_mass();
        }
        let gains = ControllerGains::new(
            gain_matrix(&self.gains.kp, m, "kp")?,
            gain_matrix(&self.gains.kv, m, "kv")?,
            gain_matrix(&self.gains.ki, m, "ki")?,
        )?;
        Ok(ModelBundle {
            name: self.name.clone(),
            model,
            target,
            gains,
            example: Example::None,
            notes: vec![],
        })
    }
}

/// Resolves `config.model` to a preset or a model file and applies overrides.
pub fn load_model(config: &RunConfig, base: Option<&Path>) -> Result<ModelBundle> {
    let mut bundle = match config.model.as_str() {
        "iwp" | "iwp-default" => {
            let iwp = Iwp::new(config.iwp.unwrap_or_default())?;
            ModelBundle {
                name: "iwp".into(),
                model: iwp.model.clone(),
                target: iwp.target.clone(),
                gains: iwp.gains.clone(),
                notes: vec!["IWP constants are illustrative defaults, not identified physical values".into()],
                example: Example::Iwp(iwp),
            }
        }
        "rip" => {
            let rip = build_rip(config.rip.clone().unwrap_or_default().fields()?)?;
            ModelBundle {
                name: "rip".into(),
                model: rip.model.clone(),
                target: rip.target.clone(),
                gains: rip.gains.clone(),
                notes: vec![
                    "RIP mechanical model is a generic template".into(),
                    "RIP design fields are user-supplied placeholders".into(),
                ],
                example: Example::Rip(rip),
            }
        }
        path => {
            let p = Path::new(path);
            let resolved = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.to_path_buf(),
            };
            let text = std::fs::read_to_string(&resolved)
                .map_err(|e| Error::Parse(format!("model `{}`: {e}", resolved.display())))?;
            let spec: CustomModelSpec =
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", resolved.display())))?;
            spec.build()?
        }
    };
    if config.input_map.as_deref() == Some("identity") {
        let n = bundle.model.n();
        bundle.model = bundle
            .model
            .with_input_map(n, constant_matrix(Matrix::identity(n, n)))?;
        let scale = |k: &Matrix| Matrix::identity(n, n) * k[(0, 0)];
        let g = &bundle.gains;
        bundle.gains = ControllerGains::new(scale(&g.kp), scale(&g.kv), scale(&g.ki))?;
        bundle.example = Example::None;
        bundle.notes.push("input map replaced by the identity".into());
    }
    Ok(bundle)
}
