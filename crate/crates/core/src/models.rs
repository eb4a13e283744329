//! Built-in inertia wheel pendulum (IWP) and rotary inverted pendulum (RIP)
//! examples: model builders, literal evaluators of the hand-expanded matching
//! terms, and direct assemblies from the model objects to check them against.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffops;
use crate::error::{Error, Result};
use crate::rebuttal::{self, kappa, rd};
use crate::sweep::{sample_states, ControllerStateSampling, Executor};
use crate::system::{
    constant_matrix, ControllerGains, DomainBox, ExtendedState, Matrix, MechanicalModel, ScalarField, TargetDesign,
    Vector,
};

/// Threshold on the annihilated right-hand side above which the IWP sweep
/// is declared unmatchable.
pub const VERDICT_TOLERANCE: f64 = 1e-4;

/// IWP constants. The defaults are illustrative, not physical: they make
/// `M`, `Md` positive definite, put a strict minimum of `Vd` at the origin
/// and satisfy the classical (no integral action) matching equation exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IwpParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub delta: f64,
    pub gamma1: f64,
    pub epsilon: f64,
    pub kp: f64,
    pub ki: f64,
    pub kv: f64,
}

impl Default for IwpParams {
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 0.5,
            k3: 1.0,
            m1: 1.0,
            m2: 2.0,
            m3: 5.0,
            delta: 0.25,
            gamma1: 2.0,
            epsilon: 1.5,
            kp: 1.0,
            ki: 1.0,
            kv: 1.0,
        }
    }
}

impl IwpParams {
    pub fn det_mass(&self) -> f64 {
        self.k2 * (self.k1 - self.k2)
    }

    /// `𝒮 = 1 + γ1 k1 k2 (m1 - m2)`.
    pub fn s_scalar(&self) -> f64 {
        1.0 + self.gamma1 * self.k1 * self.k2 * (self.m1 - self.m2)
    }

    /// Replaces `γ1` and `ε` with the unique values for which the classical
    /// matching equation holds identically.
    pub fn with_matched_design(mut self) -> Result<Self> {
        let det = self.det_mass();
        let denom = self.delta * self.k2 * (self.m1 - self.m2);
        if denom == 0.0 || self.k1 * det == 0.0 {
            return Err(Error::Construction(
                "matched design needs m1 != m2 and det M != 0".into(),
            ));
        }
        self.gamma1 = -det / denom;
        self.epsilon = self.delta * (self.k1 * self.m2 - self.k2 * self.m1) / (self.k1 * det);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.k1,
            self.k2,
            self.k3,
            self.m1,
            self.m2,
            self.m3,
            self.delta,
            self.gamma1,
            self.epsilon,
            self.kp,
            self.ki,
            self.kv,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Construction("IWP parameters must be finite".into()));
        }
        let checks = [
            (self.k2 > 0.0, "k2 > 0"),
            (self.k1 > self.k2, "k1 > k2"),
            (self.k3 > 0.0, "k3 > 0"),
            (self.delta > 0.0, "delta > 0"),
            (self.m1 > 0.0, "m1 > 0"),
            (self.m1 * self.m3 - self.m2 * self.m2 > 0.0, "m1*m3 - m2^2 > 0"),
            (self.kp > 0.0, "Kp > 0"),
            (self.ki > 0.0, "Ki > 0"),
            (self.kv > 0.0, "Kv > 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(Error::Construction(format!("IWP parameters violate {what}"))),
            None => Ok(()),
        }
    }

    pub fn mass(&self) -> Matrix {
        Matrix::from_row_slice(2, 2, &[self.k1, self.k2, self.k2, self.k2])
    }

    pub fn desired_mass(&self) -> Matrix {
        Matrix::from_row_slice(2, 2, &[self.m1, self.m2, self.m2, self.m3]) * self.delta
    }

    fn z(&self, q: &Vector) -> f64 {
        self.epsilon * self.k1 * self.gamma1 * q[0] + q[1]
    }

    pub fn desired_potential(&self, q: &Vector) -> f64 {
        -self.k3 * self.gamma1 * q[0].cos() + 0.5 * self.kp * self.z(q).powi(2)
    }

    pub fn desired_potential_gradient(&self, q: &Vector) -> Vector {
        let z = self.z(q);
        Vector::from_vec(vec![
            self.k3 * self.gamma1 * q[0].sin() + self.kp * self.epsilon * self.k1 * self.gamma1 * z,
            self.kp * z,
        ])
    }
}

/// IWP as a generic model: constant `M` and `Md`, `G = [0, 1]ᵀ`, `J2 = 0`,
/// equilibrium at the origin.
pub fn build_iwp(params: &IwpParams) -> Result<(MechanicalModel, TargetDesign, ControllerGains)> {
    params.validate()?;
    let k3 = params.k3;
    let model = MechanicalModel::new(
        "iwp",
        2,
        1,
        constant_matrix(params.mass()),
        Arc::new(move |q: &Vector| k3 * (1.0 + q[0].cos())),
        constant_matrix(Matrix::from_column_slice(2, 1, &[0.0, 1.0])),
    )?
    .with_constant_mass()
    .with_potential_gradient(Arc::new(move |q: &Vector| {
        Vector::from_vec(vec![-k3 * q[0].sin(), 0.0])
    }));
    let (pv, pg) = (*params, *params);
    let target = TargetDesign::new(
        constant_matrix(params.desired_mass()),
        Arc::new(move |q: &Vector| pv.desired_potential(q)),
        crate::system::zero_j2(2),
        Vector::zeros(2),
    )?
    .with_constant_desired_mass()
    .with_potential_gradient(Arc::new(move |q: &Vector| pg.desired_potential_gradient(q)));
    let gains = ControllerGains::scalar(params.kp, params.kv, params.ki)?;
    Ok((model, target, gains))
}

/// Where the scalar sine summand in the first and third hand-expanded terms
/// is added.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SineMapping {
    #[default]
    FirstComponent,
    BothComponents,
}

/// Coefficient of the sine summand in the third term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SineScale {
    /// `+γ1 k2 k3 (m1 - m2)`, the literal coefficient.
    #[default]
    Literal,
    /// The leading `-2` distributed over the sine summand as well.
    Distributed,
}

/// Denominator of the last summand of the fifth term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term5Denominator {
    /// `(m1 m3 - m2)²`.
    #[default]
    Literal,
    /// `(m1 m3 - m2²)`.
    Determinant,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IwpTermOptions {
    pub sine_mapping: SineMapping,
    pub sine_scale: SineScale,
    pub term5_denominator: Term5Denominator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTerm {
    pub label: String,
    pub literal: [f64; 2],
    pub direct: [f64; 2],
}

impl LabeledTerm {
    pub fn first_component_gap(&self) -> f64 {
        (self.literal[0] - self.direct[0]).abs()
    }

    pub fn max_gap(&self) -> f64 {
        self.first_component_gap().max((self.literal[1] - self.direct[1]).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IwpTerms {
    pub terms: Vec<LabeledTerm>,
    pub s: f64,
    pub l: [f64; 2],
    pub options: IwpTermOptions,
}

impl IwpTerms {
    pub fn literal_sum(&self) -> [f64; 2] {
        self.terms
            .iter()
            .fold([0.0; 2], |acc, t| [acc[0] + t.literal[0], acc[1] + t.literal[1]])
    }

    pub fn direct_sum(&self) -> [f64; 2] {
        self.terms
            .iter()
            .fold([0.0; 2], |acc, t| [acc[0] + t.direct[0], acc[1] + t.direct[1]])
    }

    /// Largest componentwise gap between the literal and direct sums.
    pub fn sum_gap(&self) -> f64 {
        let (a, b) = (self.literal_sum(), self.direct_sum());
        (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
    }

    /// Labels of terms whose literal and direct values differ by more than `tol`.
    pub fn disagreeing(&self, tol: f64) -> Vec<&str> {
        self.terms
            .iter()
            .filter(|t| t.max_gap() > tol)
            .map(|t| t.label.as_str())
            .collect()
    }
}

/// Prebuilt IWP objects, so sweeps avoid rebuilding closures per sample.
#[derive(Debug, Clone)]
pub struct Iwp {
    pub params: IwpParams,
    pub model: MechanicalModel,
    pub target: TargetDesign,
    pub gains: ControllerGains,
}

fn pair(v: &Vector) -> [f64; 2] {
    [v[0], v[1]]
}

impl Iwp {
    pub fn new(params: IwpParams) -> Result<Self> {
        let (model, target, gains) = build_iwp(&params)?;
        Ok(Self {
            params,
            model,
            target,
            gains,
        })
    }

    /// The five summands of the example's matching right-hand side, each
    /// assembled from the model objects.
    pub fn rhs_direct_terms(&self, s: &ExtendedState) -> Result<[Vector; 5]> {
        rhs_terms(&self.model, &self.target, &self.gains, s)
    }

    pub fn rhs_direct(&self, s: &ExtendedState) -> Result<Vector> {
        Ok(self.rhs_direct_terms(s)?.iter().fold(Vector::zeros(2), |a, t| a + t))
    }

    pub fn terms(&self, s: &ExtendedState, options: IwpTermOptions) -> Result<IwpTerms> {
        let direct = self.rhs_direct_terms(s)?;
        let p = &self.params;
        let (q, mom, xv) = (&s.q, &s.p, &s.x_v);
        let xq = s.x_q();
        let sc = p.s_scalar();
        let z = |x: &Vector| p.epsilon * p.gamma1 * p.k1 * x[0] + x[1];
        let sine = p.gamma1 * p.k2 * p.k3 * (p.m1 - p.m2);
        let spread = |v: f64| match options.sine_mapping {
            SineMapping::FirstComponent => [v, 0.0],
            SineMapping::BothComponents => [v, v],
        };

        let a = p.kp * p.epsilon * sc * z(q);
        let s1 = spread(sine * q[0].sin());
        let t1 = [a + s1[0], a + s1[1]];

        let c2 = p.ki * p.kp / ((p.k1 - p.k2) * p.k2) * z(&xq);
        let t2 = [2.0 * p.k2 * c2, -2.0 * p.k1 * c2];

        let b = -2.0 * p.kp * p.epsilon * sc * z(&xq);
        let scale = match options.sine_scale {
            SineScale::Literal => 1.0,
            SineScale::Distributed => -2.0,
        };
        let s3 = spread(scale * sine * xq[0].sin());
        let t3 = [b + s3[0], b + s3[1]];

        let inv = 1.0 / p.det_mass();
        let t4 = [-p.k2 * (mom[0] - mom[1]) * inv, (p.k2 * mom[0] + p.k1 * mom[1]) * inv];

        let l = [
            p.k2 * (p.m1 - p.m2) * xv[0] + p.k1 * (p.m2 - p.m1) * xv[1],
            p.k2 * (p.m1 - p.m3) * xv[0] + p.k1 * (p.m3 - p.m1) * xv[1],
        ];
        let den = match options.term5_denominator {
            Term5Denominator::Literal => (p.m1 * p.m3 - p.m2).powi(2),
            Term5Denominator::Determinant => p.m1 * p.m3 - p.m2 * p.m2,
        };
        let tail = 2.0 * p.ki * p.m1 * p.kv * xv[1] / (p.k1 * (p.k1 - p.k2) * den);
        let t5 = [-2.0 * l[0], -2.0 * l[1] - tail];

        let labels = [
            "Md M^-1 grad_q Vd",
            "-2 M^-1 K grad_xq V~",
            "-2 Md M^-1 grad_xq V~",
            "-M^-1 p",
            "-2 (Rd Md^-1 K + Md M^-1) x_v",
        ];
        let terms = labels
            .iter()
            .zip([t1, t2, t3, t4, t5])
            .zip(direct.iter())
            .map(|((label, literal), d)| LabeledTerm {
                label: label.to_string(),
                literal,
                direct: pair(d),
            })
            .collect();
        Ok(IwpTerms {
            terms,
            s: sc,
            l,
            options,
        })
    }
}

fn rhs_terms(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    s: &ExtendedState,
) -> Result<[Vector; 5]> {
    let q = &s.q;
    let xq = s.x_q();
    let minv = model.mass_inverse(q)?;
    let md = target.desired_mass(q)?;
    let mdinv = target.desired_mass_inverse(q)?;
    let k = kappa(model, gains, q)?;
    let r = rd(model, gains, q)?;
    let md_minv = &md * &minv;
    let gvt = target.desired_potential_gradient(&xq)?;
    Ok([
        &md_minv * target.desired_potential_gradient(q)?,
        -(&minv * &k * &gvt) * 2.0,
        -(&md_minv * &gvt) * 2.0,
        -(&minv * &s.p),
        -((&r * &mdinv * &k + &md_minv) * &s.x_v) * 2.0,
    ])
}

pub fn iwp_rhs_direct(params: &IwpParams, s: &ExtendedState) -> Result<Vector> {
    Iwp::new(*params)?.rhs_direct(s)
}

pub fn iwp_terms(params: &IwpParams, s: &ExtendedState, options: IwpTermOptions) -> Result<IwpTerms> {
    Iwp::new(*params)?.terms(s, options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum Verdict {
    FailToMatch,
    Matchable,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::FailToMatch => "FAIL-TO-MATCH",
            Verdict::Matchable => "MATCHABLE",
        })
    }
}

/// Variations of the IWP sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerdictOptions {
    /// Replace `G` with `I₂` (fully actuated; nothing to annihilate).
    pub full_actuation: bool,
    /// Set `Ki = Kv = 0` and sample with `x_v = 0`.
    pub zero_integral_gains: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub verdict: Verdict,
    pub samples: usize,
    pub seed: u64,
    /// Largest `|G⊥ · rhs|` over the main sweep.
    pub max_annihilated_rhs: f64,
    pub mean_annihilated_rhs: f64,
    pub worst_state: Option<ExtendedState>,
    /// Control group with `x_v = 0`: the integral-action residual (identically zero
    /// for constant `Md`) and the example rhs (generically nonzero).
    pub control_max_p41_residual: f64,
    pub control_max_annihilated_rhs: f64,
    pub options: VerdictOptions,
}

pub fn iwp_matching_verdict(
    params: &IwpParams,
    sample_count: usize,
    seed: u64,
    options: VerdictOptions,
    executor: Executor,
) -> Result<VerdictReport> {
    if sample_count == 0 {
        return Err(Error::Contract("sample count must be positive".into()));
    }
    let iwp = Iwp::new(*params)?;
    let mut model = iwp.model.clone();
    let mut gains = iwp.gains.clone();
    if options.full_actuation {
        model = model.with_input_map(2, constant_matrix(Matrix::identity(2, 2)))?;
        let scale = |k: &Matrix| Matrix::identity(2, 2) * k[(0, 0)];
        gains = ControllerGains::new_unchecked(scale(&gains.kp), scale(&gains.kv), scale(&gains.ki));
    }
    if options.zero_integral_gains {
        let z = Matrix::zeros(gains.m(), gains.m());
        gains = ControllerGains::new_unchecked(gains.kp.clone(), z.clone(), z);
    }
    let target = &iwp.target;
    let sampling = if options.zero_integral_gains {
        ControllerStateSampling::Zero
    } else {
        ControllerStateSampling::default()
    };
    let domain = model.domain().clone();
    let annihilated = |s: &ExtendedState| -> Result<f64> {
        let r = rhs_terms(&model, target, &gains, s)?
            .iter()
            .fold(Vector::zeros(2), |a, t| a + t);
        Ok((model.annihilator(&s.q)? * r).norm())
    };

    let states = sample_states(&domain, sampling, sample_count, seed)?;
    let values = executor.try_map(&states, annihilated)?;
    let (mut max, mut worst) = (0.0f64, None);
    for (v, s) in values.iter().zip(&states) {
        if *v > max {
            max = *v;
            worst = Some(s.clone());
        }
    }

    let control = sample_states(&domain, ControllerStateSampling::Zero, sample_count, seed ^ 0x5eed)?;
    let p41 = executor.try_map(
        &control,
        |s| Ok(rebuttal::residual_p41(&model, target, &gains, s)?.norm),
    )?;
    let rhs0 = executor.try_map(&control, annihilated)?;

    Ok(VerdictReport {
        verdict: if max > VERDICT_TOLERANCE {
            Verdict::FailToMatch
        } else {
            Verdict::Matchable
        },
        samples: sample_count,
        seed,
        max_annihilated_rhs: max,
        mean_annihilated_rhs: values.iter().sum::<f64>() / values.len() as f64,
        worst_state: worst,
        control_max_p41_residual: p41.into_iter().fold(0.0, f64::max),
        control_max_annihilated_rhs: rhs0.into_iter().fold(0.0, f64::max),
        options,
    })
}

/// Which coefficient multiplies `p2²` (and `x_{p2}²`) in the first and third
/// RIP terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadraticVariant {
    /// `½B2`, the literal coefficient.
    #[default]
    Literal,
    /// `½B3`, the `(2,2)` entry of the derivative.
    B3,
}

/// Scalar data for the RIP example. The design constants are not available
/// here, so they are supplied by the user; the defaults are arbitrary
/// placeholders that keep `Md⁻¹` positive definite on `|q1| ≤ π`.
#[derive(Clone)]
pub struct RipFields {
    pub delta: ScalarField,
    pub delta_d: ScalarField,
    pub sigma: ScalarField,
    pub gamma: ScalarField,
    pub epsilon: ScalarField,
    /// The `(1,1)` numerator factor of `Md⁻¹`.
    pub m3: ScalarField,
    /// Entries of `∂Md⁻¹/∂q1`; finite differences are used when absent.
    pub b: Option<[ScalarField; 3]>,
    pub j2: f64,
    pub kv: f64,
    pub ki: f64,
}

impl std::fmt::Debug for RipFields {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RipFields")
            .field("b_supplied", &self.b.is_some())
            .field("j2", &self.j2)
            .field("kv", &self.kv)
            .field("ki", &self.ki)
            .finish()
    }
}

fn constant(v: f64) -> ScalarField {
    Arc::new(move |_| v)
}

impl Default for RipFields {
    fn default() -> Self {
        Self {
            delta: constant(1.0),
            delta_d: constant(1.0),
            sigma: constant(0.5),
            gamma: constant(1.0),
            epsilon: constant(2.0),
            m3: constant(2.0),
            b: Some([
                constant(0.0),
                Arc::new(|q: &Vector| -q[0].sin() * (q[0].cos() + 1.0)),
                Arc::new(|q: &Vector| -q[0].sin()),
            ]),
            j2: 1.0,
            kv: 1.0,
            ki: 1.0,
        }
    }
}

impl RipFields {
    pub fn desired_mass_inverse(&self, q: &Vector) -> Matrix {
        let c = q[0].cos();
        let d = (self.delta)(q);
        let dd = (self.delta_d)(q);
        let e = (self.epsilon)(q);
        let off = d * (self.sigma)(q) * c * (c + e) / (dd * (self.gamma)(q));
        Matrix::from_row_slice(2, 2, &[d * (self.m3)(q) / dd, off, off, d * (c + e) / dd])
    }

    fn b_values(&self, q: &Vector) -> Result<[f64; 3]> {
        match &self.b {
            Some([b1, b2, b3]) => Ok([b1(q), b2(q), b3(q)]),
            None => fd_b(self, q),
        }
    }
}

fn fd_b(fields: &RipFields, q: &Vector) -> Result<[f64; 3]> {
    let scheme = diffops::FiniteDifferenceScheme::central4(1e-4)?;
    let d = diffops::jacobian_of_matrix_field(|y| fields.desired_mass_inverse(y), q, &scheme)?;
    Ok([d[0][(0, 0)], d[0][(0, 1)], d[0][(1, 1)]])
}

/// Number of grid points used to look for zero crossings of `Δd`.
const RIP_GRID: usize = 2001;
const B_FIELD_TOLERANCE: f64 = 1e-4;

/// RIP example objects. The mechanical side is a generic rotary-pendulum
/// template (`M = [[1, ½cos q1], [½cos q1, 2 + sin² q1]]`, `V = cos q1`,
/// `G = [0, 1]ᵀ`) with no claim to the published model.
#[derive(Debug, Clone)]
pub struct Rip {
    pub fields: RipFields,
    pub model: MechanicalModel,
    pub target: TargetDesign,
    pub gains: ControllerGains,
}

pub fn build_rip(fields: RipFields) -> Result<Rip> {
    let domain = DomainBox::default_for(2);
    let (lo, hi) = (domain.q_lower[0], domain.q_upper[0]);
    let mut previous: Option<f64> = None;
    for i in 0..RIP_GRID {
        let q1 = lo + (hi - lo) * i as f64 / (RIP_GRID - 1) as f64;
        let q = Vector::from_vec(vec![q1, 0.0]);
        let dd = (fields.delta_d)(&q);
        if !dd.is_finite() || dd.abs() < 1e-12 || previous.is_some_and(|p| p.signum() != dd.signum()) {
            return Err(Error::Domain(format!(
                "Delta_d vanishes or changes sign near q1 = {q1:.6}"
            )));
        }
        previous = Some(dd);
        let mi = fields.desired_mass_inverse(&q);
        if mi.iter().any(|v| !v.is_finite()) || diffops::min_symmetric_eigenvalue(&mi) <= 0.0 {
            return Err(Error::Domain(format!("Md^-1 is not positive definite at q1 = {q1:.6}")));
        }
        if fields.b.is_some() && i % 20 == 0 {
            let given = fields.b_values(&q)?;
            let fd = fd_b(&fields, &q)?;
            for (k, (a, b)) in given.iter().zip(fd).enumerate() {
                if (a - b).abs() > B_FIELD_TOLERANCE {
                    return Err(Error::Construction(format!(
                        "B{} = {a} disagrees with the derivative of Md^-1 ({b}) at q1 = {q1:.6}",
                        k + 1
                    )));
                }
            }
        }
    }

    let model = MechanicalModel::new(
        "rip-template",
        2,
        1,
        Arc::new(|q: &Vector| {
            let c = 0.5 * q[0].cos();
            Matrix::from_row_slice(2, 2, &[1.0, c, c, 2.0 + q[0].sin().powi(2)])
        }),
        Arc::new(|q: &Vector| q[0].cos()),
        constant_matrix(Matrix::from_column_slice(2, 1, &[0.0, 1.0])),
    )?;
    let fm = fields.clone();
    let j2 = fields.j2;
    let target = TargetDesign::new(
        Arc::new(move |q: &Vector| {
            diffops::inverse(&fm.desired_mass_inverse(q)).unwrap_or_else(|_| Matrix::from_element(2, 2, f64::NAN))
        }),
        Arc::new(|q: &Vector| 0.5 * q.norm_squared()),
        Arc::new(move |_: &Vector, _: &Vector| Matrix::from_row_slice(2, 2, &[0.0, j2, -j2, 0.0])),
        Vector::zeros(2),
    )?;
    let gains = ControllerGains::new_unchecked(
        Matrix::identity(1, 1),
        Matrix::from_element(1, 1, fields.kv),
        Matrix::from_element(1, 1, fields.ki),
    );
    Ok(Rip {
        fields,
        model,
        target,
        gains,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipTerms {
    /// Labeled values of the four hand-expanded terms, in order.
    pub terms: Vec<(String, [f64; 2])>,
    /// `𝒬`: the quadratic form in `x_p`.
    pub q_form: f64,
    /// `𝒫`: the column multiplying `x_{v2}`.
    pub p_column: [f64; 2],
    /// `(J2 - Rd)Md⁻¹𝒦x_v` assembled from matrices, for the second term.
    pub second_term_direct: [f64; 2],
    pub variant: QuadraticVariant,
}

impl RipTerms {
    /// First component of `term1 + term2 - term3 + term4`.
    pub fn star_from_terms(&self) -> f64 {
        let t = |i: usize| self.terms[i].1[0];
        t(0) + t(1) - t(2) + t(3)
    }
}

fn quadratic(b: [f64; 3], x1: f64, x2: f64, variant: QuadraticVariant) -> f64 {
    let c22 = match variant {
        QuadraticVariant::Literal => b[1],
        QuadraticVariant::B3 => b[2],
    };
    0.5 * b[0] * x1 * x1 + b[1] * x1 * x2 + 0.5 * c22 * x2 * x2
}

impl Rip {
    /// The hand-expanded terms at `s`; `xv2_dot` is the controller-state rate
    /// entering the last term.
    pub fn terms(&self, s: &ExtendedState, xv2_dot: f64, variant: QuadraticVariant) -> Result<RipTerms> {
        let f = &self.fields;
        let q = &s.q;
        let b = f.b_values(q)?;
        let xp1 = s.p[0];
        let xp2 = s.p[1] + f.ki * s.x_v[1];
        let c = q[0].cos();
        let d = (f.delta)(q) / (f.delta_d)(q);
        let e = (f.epsilon)(q);
        let m22 = d * (c + e);
        let m12 = d * (f.sigma)(q) * c * (c + e) / (f.gamma)(q);
        let p_column = [f.j2 * m22 * f.ki, (-f.j2 * m12 - f.kv * m22) * f.ki];
        let q_form = quadratic(b, xp1, xp2, variant);

        let k = kappa(&self.model, &self.gains, q)?;
        let r = rd(&self.model, &self.gains, q)?;
        let j = self.target.j2(q, &s.p)?;
        let direct = (j - r) * f.desired_mass_inverse(q) * k * &s.x_v;

        let terms = vec![
            (
                "1/2 Md M^-1 sum e_i p^T dMd^-1 p".to_string(),
                [quadratic(b, s.p[0], s.p[1], variant), 0.0],
            ),
            (
                "(J2 - Rd) Md^-1 K x_v".to_string(),
                [p_column[0] * s.x_v[1], p_column[1] * s.x_v[1]],
            ),
            ("1/2 Md M^-1 sum e_i x_p^T dMd^-1 x_p".to_string(), [q_form, 0.0]),
            ("-K x_v_dot".to_string(), [0.0, xv2_dot]),
        ];
        Ok(RipTerms {
            terms,
            q_form,
            p_column,
            second_term_direct: pair(&direct),
            variant,
        })
    }

    /// Closed-form first component of the matching right-hand side.
    pub fn star(&self, s: &ExtendedState, variant: QuadraticVariant) -> Result<f64> {
        let f = &self.fields;
        let q = &s.q;
        let b = f.b_values(q)?;
        let c = q[0].cos();
        let v = s.x_v[1];
        let (p1, p2) = (s.p[0], s.p[1]);
        let c22 = match variant {
            QuadraticVariant::Literal => b[1],
            QuadraticVariant::B3 => b[2],
        };
        Ok(f.j2 * (f.delta)(q) * (c + (f.epsilon)(q)) / (f.delta_d)(q) * v
            - b[1] * p1 * v
            - c22 * p2 * v
            - 0.5 * c22 * v * v)
    }
}

pub fn rip_terms(rip: &Rip, s: &ExtendedState, xv2_dot: f64, variant: QuadraticVariant) -> Result<RipTerms> {
    rip.terms(s, xv2_dot, variant)
}

pub fn rip_star(rip: &Rip, s: &ExtendedState) -> Result<f64> {
    rip.star(s, QuadraticVariant::Literal)
}
