//! Residual operators and bound monitors for the disputed integral-action
//! extensions of IDA-PBC.
//!
//! Every matching residual here is the left-annihilated part of the vector
//! that `G v` would have to equal: a nonzero value means no control `v`
//! solves the matching equation at that state, whatever `v` is chosen.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffops::{self, weighted_sq_norm};
use crate::error::{check_dim, Error, Result};
use crate::idapbc::{self, MatchingStatus};
use crate::system::{
    ControllerGains, ExtendedState, Matrix, MechanicalModel, ScalarField, TargetDesign, Vector, VectorField,
};

/// Membership test tolerance for `d2 ∈ range(G)`.
pub const IMAGE_TOLERANCE: f64 = 1e-10;

/// `𝒦 = G Ki Gᵀ`.
pub fn kappa(model: &MechanicalModel, gains: &ControllerGains, q: &Vector) -> Result<Matrix> {
    let g = model.input_map(q)?;
    check_dim("Ki", g.ncols(), gains.ki.nrows())?;
    Ok(&g * &gains.ki * g.transpose())
}

/// `Rd = G Kv Gᵀ`.
pub fn rd(model: &MechanicalModel, gains: &ControllerGains, q: &Vector) -> Result<Matrix> {
    let g = model.input_map(q)?;
    check_dim("Kv", g.ncols(), gains.kv.nrows())?;
    Ok(&g * &gains.kv * g.transpose())
}

/// Where `Md⁻¹` inside the augmented energy is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdArgument {
    /// At the plant configuration `q = x_q + x_v`.
    #[default]
    AtQ,
    AtXq,
}

/// `H̃(x_q, x_p, x_v) = ½x_pᵀMd⁻¹x_p + Ṽ(x_q) + ½x_vᵀWx_v`.
#[derive(Clone)]
pub struct AugmentedEnergy {
    shifted_potential: ScalarField,
    shifted_potential_gradient: Option<VectorField>,
    weight: Matrix,
    md_argument: MdArgument,
}

impl std::fmt::Debug for AugmentedEnergy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AugmentedEnergy")
            .field("weight", &self.weight)
            .field("md_argument", &self.md_argument)
            .finish()
    }
}

impl AugmentedEnergy {
    pub fn new(shifted_potential: ScalarField, weight: Matrix, md_argument: MdArgument) -> Result<Self> {
        if diffops::asymmetry(&weight) >= 1e-12 || diffops::min_symmetric_eigenvalue(&weight) <= 0.0 {
            return Err(Error::Construction(
                "x_v weight W must be symmetric positive definite".into(),
            ));
        }
        Ok(Self {
            shifted_potential,
            shifted_potential_gradient: None,
            weight,
            md_argument,
        })
    }

    /// `Ṽ = Vd` evaluated at `x_q`, `W = I`.
    pub fn from_target(target: &TargetDesign) -> Self {
        let t = target.clone();
        let tg = target.clone();
        Self {
            shifted_potential: Arc::new(move |x| t.desired_potential(x).unwrap_or(f64::NAN)),
            shifted_potential_gradient: Some(Arc::new(move |x| {
                tg.desired_potential_gradient(x)
                    .unwrap_or_else(|_| Vector::from_element(x.len(), f64::NAN))
            })),
            weight: Matrix::identity(target.n(), target.n()),
            md_argument: MdArgument::AtQ,
        }
    }

    pub fn with_weight(mut self, weight: Matrix) -> Result<Self> {
        if diffops::asymmetry(&weight) >= 1e-12 || diffops::min_symmetric_eigenvalue(&weight) <= 0.0 {
            return Err(Error::Construction(
                "x_v weight W must be symmetric positive definite".into(),
            ));
        }
        self.weight = weight;
        Ok(self)
    }

    pub fn with_md_argument(mut self, md_argument: MdArgument) -> Self {
        self.md_argument = md_argument;
        self
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn md_argument(&self) -> MdArgument {
        self.md_argument
    }

    fn md_point(&self, x_q: &Vector, x_v: &Vector) -> Vector {
        match self.md_argument {
            MdArgument::AtQ => x_q + x_v,
            MdArgument::AtXq => x_q.clone(),
        }
    }

    pub fn value(&self, target: &TargetDesign, x_q: &Vector, x_p: &Vector, x_v: &Vector) -> Result<f64> {
        let mdinv = target.desired_mass_inverse(&self.md_point(x_q, x_v))?;
        Ok(0.5 * weighted_sq_norm(x_p, &mdinv)
            + (self.shifted_potential)(x_q)
            + 0.5 * weighted_sq_norm(x_v, &self.weight))
    }

    fn potential_gradient(&self, target: &TargetDesign, x_q: &Vector) -> Result<Vector> {
        match &self.shifted_potential_gradient {
            Some(g) => Ok(g(x_q)),
            None => diffops::grad(|x| (self.shifted_potential)(x), x_q, target.scheme()),
        }
    }

    pub fn grad_xq(&self, target: &TargetDesign, x_q: &Vector, x_p: &Vector, x_v: &Vector) -> Result<Vector> {
        Ok(target.quadratic_gradient(&self.md_point(x_q, x_v), x_p)? + self.potential_gradient(target, x_q)?)
    }

    pub fn grad_xp(&self, target: &TargetDesign, x_q: &Vector, x_p: &Vector, x_v: &Vector) -> Result<Vector> {
        Ok(target.desired_mass_inverse(&self.md_point(x_q, x_v))? * x_p)
    }

    pub fn grad_xv(&self, target: &TargetDesign, x_q: &Vector, x_p: &Vector, x_v: &Vector) -> Result<Vector> {
        let base = &self.weight * x_v;
        Ok(match self.md_argument {
            MdArgument::AtQ => base + target.quadratic_gradient(&self.md_point(x_q, x_v), x_p)?,
            MdArgument::AtXq => base,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermContribution {
    pub label: String,
    /// Term before annihilation.
    pub value: Vec<f64>,
    /// `G⊥ · term`.
    pub annihilated: Vec<f64>,
    pub annihilated_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub residual: Vec<f64>,
    pub norm: f64,
    pub components_by_term: Vec<TermContribution>,
    pub state: ExtendedState,
}

impl ResidualReport {
    fn assemble(perp: &Matrix, terms: Vec<(&str, Vector)>, state: &ExtendedState) -> (Self, Vector) {
        let n = state.n();
        let mut bracket = Vector::zeros(n);
        let components_by_term = terms
            .into_iter()
            .map(|(label, value)| {
                bracket += &value;
                let a = perp * &value;
                TermContribution {
                    label: label.to_string(),
                    value: value.iter().copied().collect(),
                    annihilated_norm: a.norm(),
                    annihilated: a.iter().copied().collect(),
                }
            })
            .collect();
        let residual = perp * &bracket;
        (
            Self {
                norm: residual.norm(),
                residual: residual.iter().copied().collect(),
                components_by_term,
                state: state.clone(),
            },
            bracket,
        )
    }

    pub fn status(&self, tolerance: f64) -> MatchingStatus {
        MatchingStatus::classify(self.norm, tolerance)
    }
}

fn check_extended(model: &MechanicalModel, s: &ExtendedState) -> Result<()> {
    check_dim("extended state", model.n(), s.n())
}

/// The four terms of the bracket in the integral-action matching equation.
fn terms_p41(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    s: &ExtendedState,
) -> Result<Vec<(&'static str, Vector)>> {
    check_extended(model, s)?;
    let q = &s.q;
    let k = kappa(model, gains, q)?;
    let r = rd(model, gains, q)?;
    let minv = model.mass_inverse(q)?;
    let md = target.desired_mass(q)?;
    let mdinv = target.desired_mass_inverse(q)?;
    let j2 = target.j2(q, &s.p)?;
    let md_minv = &md * &minv;

    let t1 = (&j2 - &r) * &mdinv * &k * &s.x_v;
    let t2 = -(&k * k.transpose() * &minv * target.desired_potential_gradient(q)?);
    // ∇_q(pᵀMd⁻¹p) = 2 × quadratic_gradient
    let t3 = &md_minv * target.quadratic_gradient(q, &s.p)?;
    let t4 = if target.desired_mass_is_constant() && s.x_v.iter().all(|v| *v == 0.0) {
        Vector::zeros(s.n())
    } else {
        let x_v = s.x_v.clone();
        let p = s.p.clone();
        let grad = diffops::grad(
            |y| {
                let (Ok(ky), Ok(mi)) = (kappa(model, gains, y), target.desired_mass_inverse(y)) else {
                    return f64::NAN;
                };
                let xp = &p + ky * &x_v;
                xp.dot(&(mi * &xp))
            },
            q,
            target.scheme(),
        )?;
        -(&md_minv * grad) * 0.5
    };
    Ok(vec![
        ("(J2 - Rd) Md^-1 K x_v", t1),
        ("-K K^T M^-1 grad_q Vd", t2),
        ("+1/2 Md M^-1 grad_q(p^T Md^-1 p)", t3),
        ("-1/2 Md M^-1 grad_q(x_p^T Md^-1 x_p)", t4),
    ])
}

/// The full bracket `b` whose annihilated part is [`residual_p41`].
pub fn bracket_p41(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    s: &ExtendedState,
) -> Result<Vector> {
    Ok(terms_p41(model, target, gains, s)?
        .into_iter()
        .fold(Vector::zeros(s.n()), |acc, (_, t)| acc + t))
}

pub fn residual_p41(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    s: &ExtendedState,
) -> Result<ResidualReport> {
    let terms = terms_p41(model, target, gains, s)?;
    let perp = model.annihilator(&s.q)?;
    Ok(ResidualReport::assemble(&perp, terms, s).0)
}

/// The pseudo-inverse control law `v = (GᵀG)⁻¹Gᵀ b` applied to the integral-action
/// bracket, which silently drops `G⊥ b`.
pub fn pseudo_inverse_control_p41(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    s: &ExtendedState,
) -> Result<Vector> {
    let b = bracket_p41(model, target, gains, s)?;
    Ok(diffops::pseudo_inverse_tall(&model.input_map(&s.q)?)? * b)
}

/// Residual of the augmented-energy matching equation. `Md⁻¹` is evaluated at `q`
/// everywhere except the fourth term, which uses `x_q` as in the closed-form expression.
pub fn residual_p51(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    energy: &AugmentedEnergy,
    s: &ExtendedState,
) -> Result<ResidualReport> {
    check_extended(model, s)?;
    let q = &s.q;
    let p = &s.p;
    let k = kappa(model, gains, q)?;
    let r = rd(model, gains, q)?;
    let minv = model.mass_inverse(q)?;
    let md = target.desired_mass(q)?;
    let mdinv = target.desired_mass_inverse(q)?;
    let x_q = s.x_q();
    let x_p = s.x_p(&k)?;
    let mdinv_xq = target.desired_mass_inverse(&x_q)?;
    let j_r = target.j2(q, p)? - &r;
    let md_minv = &md * &minv;
    let grad_xq = energy.grad_xq(target, &x_q, &x_p, &s.x_v)?;

    let terms = vec![
        (
            "+Md M^-1 grad_q Hd",
            &md_minv * idapbc::desired_energy_gradient_q(target, q, p)?,
        ),
        (
            "-2 (M^-1 K + Md M^-1) grad_xq H~",
            -((&minv * &k + &md_minv) * grad_xq) * 2.0,
        ),
        ("-(J2 - Rd) Md^-1(q) p", -(&j_r * &mdinv * p)),
        ("+(J2 - Rd) Md^-1(x_q) p", &j_r * mdinv_xq * p),
        ("-M^-1 p", -(&minv * p)),
        ("+2 (J2 - Rd) Md^-1 K x_v", (&j_r * &mdinv * &k * &s.x_v) * 2.0),
        ("-2 Md M^-1 x_v", -(&md_minv * &s.x_v) * 2.0),
    ];
    let perp = model.annihilator(q)?;
    Ok(ResidualReport::assemble(&perp, terms, s).0)
}

/// Momentum coordinate used in the ẋ_q derivation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumCoordinate {
    /// `x_p = ½p + 𝒦x_v`: the only choice under which the rewrite
    /// `½M⁻¹p = M⁻¹x_p - M⁻¹𝒦x_v` holds.
    #[default]
    Half,
    /// `x_p = p + 𝒦x_v`, the integral-action coordinate.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XqChain {
    /// Successive right-hand sides of the ẋ_q derivation.
    pub lines: Vec<Vec<f64>>,
    /// `M⁻¹Md∇_{x_p}H̃`: the first row of the claimed closed loop.
    pub claimed_first_row: Vec<f64>,
    /// `line5 - claimed_first_row`.
    pub deviation: Vec<f64>,
    /// `-M⁻¹𝒦(∇_{x_q}H̃ + ∇_{x_v}H̃) + d1`.
    pub predicted_deviation: Vec<f64>,
}

impl XqChain {
    pub fn max_pairwise_gap(&self) -> f64 {
        let mut gap = 0.0f64;
        for a in &self.lines {
            for b in &self.lines {
                for (x, y) in a.iter().zip(b) {
                    gap = gap.max((x - y).abs());
                }
            }
        }
        gap
    }

    pub fn deviation_mismatch(&self) -> f64 {
        self.deviation
            .iter()
            .zip(&self.predicted_deviation)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Evaluates the five successive expressions for `ẋ_q = q̇ - ẋ_v` under the
/// controller-state law `ẋ_v = M⁻¹𝒦∇_{x_q}H̃ + ½M⁻¹p`.
pub fn xq_dot_chain(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    energy: &AugmentedEnergy,
    s: &ExtendedState,
    d1: &Vector,
    coordinate: MomentumCoordinate,
) -> Result<XqChain> {
    check_extended(model, s)?;
    check_dim("d1", model.n(), d1.len())?;
    let q = &s.q;
    let k = kappa(model, gains, q)?;
    let minv = model.mass_inverse(q)?;
    let x_q = s.x_q();
    let x_p = match coordinate {
        MomentumCoordinate::Half => &s.p * 0.5 + &k * &s.x_v,
        MomentumCoordinate::Full => s.x_p(&k)?,
    };
    let md_at = match energy.md_argument() {
        MdArgument::AtQ => q.clone(),
        MdArgument::AtXq => x_q.clone(),
    };
    let md = target.desired_mass(&md_at)?;
    let mdinv = target.desired_mass_inverse(&md_at)?;
    let gq = energy.grad_xq(target, &x_q, &x_p, &s.x_v)?;
    let gp = energy.grad_xp(target, &x_q, &x_p, &s.x_v)?;
    let gv = energy.grad_xv(target, &x_q, &x_p, &s.x_v)?;
    let mk = &minv * &k;
    let mp = &minv * &s.p;

    let line1 = &mp + d1 - &mk * &gq - &mp * 0.5;
    let line2 = -(&mk * &gq) + &mp * 0.5 + d1;
    let line3 = -(&mk * &gq) + &minv * &x_p - &mk * &s.x_v + d1;
    let line4 = -(&mk * &gq) + &minv * &md * &mdinv * &x_p - &mk * &s.x_v + d1;
    let line5 = -(&mk * &gq) + &minv * &md * &gp - &mk * &gv + d1;
    let claimed = &minv * &md * &gp;
    let deviation = &line5 - &claimed;
    let predicted = -(&mk * (&gq + &gv)) + d1;
    let to_vec = |v: &Vector| v.iter().copied().collect::<Vec<_>>();
    Ok(XqChain {
        lines: [&line1, &line2, &line3, &line4, &line5]
            .into_iter()
            .map(to_vec)
            .collect(),
        claimed_first_row: to_vec(&claimed),
        deviation: to_vec(&deviation),
        predicted_deviation: to_vec(&predicted),
    })
}

/// Unit vector `w` with `GᵀMd⁻¹w = 0`, built as `Md` times the first row of
/// the annihilator. Along `x_p = t w` the dissipation output vanishes for
/// every `t`, so no K∞ lower bound in `|x_p|` exists.
pub fn kernel_witness(model: &MechanicalModel, target: &TargetDesign, q: &Vector) -> Result<Vector> {
    if !model.is_underactuated() {
        return Err(Error::NoKernel);
    }
    let perp = model.annihilator(q)?;
    let w = target.desired_mass(q)? * perp.row(0).transpose();
    let norm = w.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Rank {
            singular_values: diffops::singular_values(&target.desired_mass(q)?),
        });
    }
    Ok(w / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KInfinityWitness {
    pub q: Vec<f64>,
    pub w: Vec<f64>,
    /// `|GᵀMd⁻¹w|`.
    pub output_norm: f64,
    /// `½λmin(Kv)|GᵀMd⁻¹w|²`, the claimed lower bound evaluated at `x_p = w`.
    pub dissipation_term: f64,
}

pub fn k_infinity_witness(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    q: &Vector,
) -> Result<KInfinityWitness> {
    let w = kernel_witness(model, target, q)?;
    let y = model.input_map(q)?.transpose() * target.desired_mass_inverse(q)? * &w;
    let lambda = diffops::min_symmetric_eigenvalue(&gains.kv);
    Ok(KInfinityWitness {
        q: q.iter().copied().collect(),
        output_norm: y.norm(),
        dissipation_term: 0.5 * lambda * y.norm_squared(),
        w: w.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `-‖GᵀMd⁻¹x_p‖²_Kv + (Md⁻¹x_p)ᵀd2`.
    pub lhs_upper: f64,
    /// `-½λmin(Kv)|GᵀMd⁻¹x_p|² + |d2|²/(2λmin(Kv))`.
    pub claimed_rhs: f64,
    /// `d2 ∈ range(G)`, the only case where Young's inequality applies.
    pub corrected_applicable: bool,
}

impl BoundTerms {
    pub fn disputed_bound_violated(&self) -> bool {
        self.lhs_upper > self.claimed_rhs
    }
}

pub fn dissipation_bound_terms(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    q: &Vector,
    x_p: &Vector,
    d2: &Vector,
) -> Result<BoundTerms> {
    check_dim("x_p", model.n(), x_p.len())?;
    check_dim("d2", model.n(), d2.len())?;
    let g = model.input_map(q)?;
    let mdinv = target.desired_mass_inverse(q)?;
    let y = g.transpose() * &mdinv * x_p;
    let lambda = diffops::min_symmetric_eigenvalue(&gains.kv);
    let perp = diffops::left_annihilator(&g)?;
    Ok(BoundTerms {
        lhs_upper: -weighted_sq_norm(&y, &gains.kv) + (mdinv * x_p).dot(d2),
        claimed_rhs: -0.5 * lambda * y.norm_squared() + d2.norm_squared() / (2.0 * lambda),
        corrected_applicable: (perp * d2).norm() < IMAGE_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoungCounterexample {
    pub q: Vec<f64>,
    pub x_p: Vec<f64>,
    pub d2: Vec<f64>,
    pub lhs_upper: f64,
    pub claimed_rhs: f64,
}

const SCALE_GRID: [f64; 9] = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0];

/// Deterministic search for a state where the disputed bound fails: `x_p`
/// runs along the kernel witness, `d2` along `Md⁻¹w` (orthogonal to
/// `range(G)`), and the grid instance with the largest violation is kept.
pub fn young_counterexample(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    q: &Vector,
) -> Result<Option<YoungCounterexample>> {
    let w = kernel_witness(model, target, q)?;
    let dir = target.desired_mass_inverse(q)? * &w;
    let dir = &dir / dir.norm();
    let mut best: Option<(f64, YoungCounterexample)> = None;
    for &t in &SCALE_GRID {
        for &s in &SCALE_GRID {
            let x_p = &w * t;
            let d2 = &dir * s;
            let b = dissipation_bound_terms(model, target, gains, q, &x_p, &d2)?;
            let gap = b.lhs_upper - b.claimed_rhs;
            if gap > 0.0 && best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((
                    gap,
                    YoungCounterexample {
                        q: q.iter().copied().collect(),
                        x_p: x_p.iter().copied().collect(),
                        d2: d2.iter().copied().collect(),
                        lhs_upper: b.lhs_upper,
                        claimed_rhs: b.claimed_rhs,
                    },
                ));
            }
        }
    }
    Ok(best.map(|(_, c)| c))
}

/// `-½λ|y|² + |d̂|²/(2λ)`, the Young bound for a matched disturbance.
pub fn matched_young_rhs(lambda_min: f64, y: &Vector, d2hat: &Vector) -> f64 {
    -0.5 * lambda_min * y.norm_squared() + d2hat.norm_squared() / (2.0 * lambda_min)
}

/// Algebraic slack of the corrected bound at one point: the matched Young
/// bound minus the exact upper bound `-‖y‖²_Kv + yᵀd̂2`.
pub fn matched_bound_gap(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    q: &Vector,
    x_p: &Vector,
    d2hat: &Vector,
) -> Result<f64> {
    let g = model.input_map(q)?;
    check_dim("matched disturbance", g.ncols(), d2hat.len())?;
    let y = g.transpose() * target.desired_mass_inverse(q)? * x_p;
    let exact = -weighted_sq_norm(&y, &gains.kv) + y.dot(d2hat);
    Ok(matched_young_rhs(diffops::min_symmetric_eigenvalue(&gains.kv), &y, d2hat) - exact)
}

/// One sample along a disturbed trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IissPoint {
    pub q: Vector,
    pub x_p: Vector,
    pub d2hat: Vector,
    /// Time derivative of the storage function along the flow.
    pub storage_rate: f64,
}

/// Pointwise slack of `Ḣ̃ ≤ -½λmin|y_p|² + |d̂2|²/(2λmin)` with the given
/// damping gain; nonnegative certifies the bound at this point.
pub fn iiss_margin_with_gain(
    model: &MechanicalModel,
    target: &TargetDesign,
    damping_gain: &Matrix,
    point: &IissPoint,
) -> Result<f64> {
    let g = model.input_map(&point.q)?;
    check_dim("matched disturbance", g.ncols(), point.d2hat.len())?;
    let y = g.transpose() * target.desired_mass_inverse(&point.q)? * &point.x_p;
    let lambda = diffops::min_symmetric_eigenvalue(damping_gain);
    Ok(matched_young_rhs(lambda, &y, &point.d2hat) - point.storage_rate)
}

pub fn iiss_margin(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    point: &IissPoint,
) -> Result<f64> {
    iiss_margin_with_gain(model, target, &gains.kv, point)
}

/// Largest `‖G⊥J2Md⁻¹G‖` over the given states; zero (with constant `Md`) is
/// the sufficient condition for the integral-action residual to vanish.
pub fn interconnection_defect(model: &MechanicalModel, target: &TargetDesign, states: &[ExtendedState]) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in states {
        let g = model.input_map(&s.q)?;
        let perp = diffops::left_annihilator(&g)?;
        let d = perp * target.j2(&s.q, &s.p)? * target.desired_mass_inverse(&s.q)? * g;
        worst = worst.max(d.norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_iwp, IwpParams};
    use crate::sweep::{sample_states, ControllerStateSampling};
    use crate::system::{constant_matrix, zero_j2, DomainBox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iwp() -> (MechanicalModel, TargetDesign, ControllerGains) {
        build_iwp(&IwpParams::default()).unwrap()
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// n = 4, m = 2, q-dependent mass, constant G and Md, J2 = G S Gᵀ which
    /// satisfies G⊥J2Md⁻¹G = 0.
    fn structured_j2_system(seed: u64) -> (MechanicalModel, TargetDesign, ControllerGains) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_matrix(&mut rng, 4, 2);
        let a = random_matrix(&mut rng, 4, 4);
        let md = &a * a.transpose() + Matrix::identity(4, 4);
        let gj = g.clone();
        let model = MechanicalModel::new(
            "structured-j2",
            4,
            2,
            Arc::new(|q: &Vector| {
                let mut m = Matrix::identity(4, 4) * 2.0;
                m[(0, 1)] = 0.5 * q[2].cos();
                m[(1, 0)] = m[(0, 1)];
                m[(3, 3)] += q[0].sin().powi(2);
                m
            }),
            Arc::new(|q: &Vector| q[0].cos() + 0.5 * q[1] * q[1]),
            constant_matrix(g),
        )
        .unwrap();
        let target = TargetDesign::new(
            constant_matrix(md),
            Arc::new(|q: &Vector| 0.5 * q.norm_squared()),
            Arc::new(move |q: &Vector, p: &Vector| {
                let s = q[1].sin() + p[0];
                let skew = Matrix::from_row_slice(2, 2, &[0.0, s, -s, 0.0]);
                &gj * skew * gj.transpose()
            }),
            Vector::zeros(4),
        )
        .unwrap()
        .with_constant_desired_mass();
        let gains = ControllerGains::new(
            Matrix::identity(2, 2),
            Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            Matrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.7]),
        )
        .unwrap();
        (model, target, gains)
    }

    #[test]
    fn kappa_and_damping() {
        let (model, _, gains) = iwp();
        let p = IwpParams::default();
        let k = kappa(&model, &gains, &Vector::zeros(2)).unwrap();
        assert_eq!(k, Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, p.ki]));
        let r = rd(&model, &gains, &Vector::zeros(2)).unwrap();
        assert_eq!(r, Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, p.kv]));

        let (model, _, gains) = structured_j2_system(1);
        for k in [
            kappa(&model, &gains, &Vector::zeros(4)).unwrap(),
            rd(&model, &gains, &Vector::zeros(4)).unwrap(),
        ] {
            assert!(diffops::asymmetry(&k) < 1e-15);
            let mut eig: Vec<f64> = k.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            assert!(eig[0] > -1e-12 && eig[1].abs() < 1e-12 && eig[2] > 1e-6);
        }
    }

    #[test]
    fn projector_kappa_for_orthonormal_columns() {
        let g = Matrix::from_row_slice(3, 2, &[0.6, 0.0, 0.8, 0.0, 0.0, 1.0]);
        let model = MechanicalModel::new(
            "orth",
            3,
            2,
            constant_matrix(Matrix::identity(3, 3)),
            Arc::new(|_| 0.0),
            constant_matrix(g.clone()),
        )
        .unwrap();
        let gains = ControllerGains::identity(2);
        let k = kappa(&model, &gains, &Vector::zeros(3)).unwrap();
        assert!((&k - &g * g.transpose()).amax() < 1e-15);
        assert!((&k * &k - &k).amax() < 1e-15);
    }

    #[test]
    fn p41_vanishes_without_controller_state() {
        let (model, target, gains) = iwp();
        let states = sample_states(model.domain(), ControllerStateSampling::Zero, 200, 3).unwrap();
        for s in &states {
            assert!(residual_p41(&model, &target, &gains, s).unwrap().norm < 1e-10);
        }
    }

    #[test]
    fn p41_vanishes_with_structured_j2() {
        let (model, target, gains) = structured_j2_system(7);
        let states = sample_states(model.domain(), ControllerStateSampling::Box { half_width: 1.0 }, 200, 4).unwrap();
        assert!(interconnection_defect(&model, &target, &states).unwrap() < 1e-12);
        for s in &states {
            assert!(residual_p41(&model, &target, &gains, s).unwrap().norm < 1e-10);
        }
    }

    #[test]
    fn p41_detects_state_dependent_j2() {
        let (model, target, gains) = iwp();
        let target = target.with_j2(Arc::new(|q: &Vector, _: &Vector| {
            let j = 1.0 + 0.5 * q[0].cos();
            Matrix::from_row_slice(2, 2, &[0.0, j, -j, 0.0])
        }));
        let states = sample_states(model.domain(), ControllerStateSampling::default(), 200, 5).unwrap();
        let big = states
            .iter()
            .filter(|s| residual_p41(&model, &target, &gains, s).unwrap().norm > 1e-4)
            .count();
        assert!(big > 190, "{big}");
    }

    #[test]
    fn p41_report_terms_sum_to_residual() {
        let (model, target, gains) = structured_j2_system(2);
        let target = target.with_j2(Arc::new(|q: &Vector, _: &Vector| {
            let mut j = Matrix::zeros(4, 4);
            j[(0, 3)] = 1.0 + q[1];
            j[(3, 0)] = -j[(0, 3)];
            j
        }));
        let s = ExtendedState::new(
            v(&[0.1, 0.2, 0.3, 0.4]),
            v(&[1.0, -1.0, 0.5, 0.0]),
            v(&[0.3, 0.1, -0.2, 0.5]),
        )
        .unwrap();
        let r = residual_p41(&model, &target, &gains, &s).unwrap();
        assert_eq!(r.components_by_term.len(), 4);
        let mut sum = vec![0.0; r.residual.len()];
        for t in &r.components_by_term {
            for (a, b) in sum.iter_mut().zip(&t.annihilated) {
                *a += b;
            }
        }
        for (a, b) in sum.iter().zip(&r.residual) {
            assert!((a - b).abs() < 1e-12);
        }
        let recomputed = r.residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((recomputed - r.norm).abs() <= 1e-15 * r.norm.max(1.0));
    }

    #[test]
    fn pseudo_inverse_control_at_rest_and_decomposition() {
        let (model, target, gains) = structured_j2_system(3);
        let target = target.with_j2(Arc::new(|_: &Vector, _: &Vector| {
            let mut j = Matrix::zeros(4, 4);
            j[(1, 2)] = 0.7;
            j[(2, 1)] = -0.7;
            j
        }));
        let states = sample_states(model.domain(), ControllerStateSampling::Box { half_width: 1.0 }, 50, 6).unwrap();
        for s in &states {
            let b = bracket_p41(&model, &target, &gains, s).unwrap();
            let vctl = pseudo_inverse_control_p41(&model, &target, &gains, s).unwrap();
            let r = residual_p41(&model, &target, &gains, s).unwrap();
            let g = model.input_map(&s.q).unwrap();
            let perp = model.annihilator(&s.q).unwrap();
            let rebuilt = &g * vctl + perp.transpose() * Vector::from_vec(r.residual.clone());
            assert!((b - rebuilt).amax() < 1e-12);
        }

        let s = ExtendedState::at_rest(v(&[0.3, -0.2, 1.0, 0.1]), v(&[0.5, 0.5, -0.5, 1.0])).unwrap();
        let vctl = pseudo_inverse_control_p41(&model, &target, &gains, &s).unwrap();
        let k = kappa(&model, &gains, &s.q).unwrap();
        let g = model.input_map(&s.q).unwrap();
        let expected = -(diffops::pseudo_inverse_tall(&g).unwrap()
            * &k
            * k.transpose()
            * model.mass_inverse(&s.q).unwrap()
            * target.desired_potential_gradient(&s.q).unwrap());
        assert!((vctl - expected).amax() < 1e-12);
    }

    #[test]
    fn pseudo_inverse_control_fully_actuated_is_bracket() {
        let model = MechanicalModel::new(
            "fa",
            2,
            2,
            constant_matrix(Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])),
            Arc::new(|_| 0.0),
            constant_matrix(Matrix::identity(2, 2)),
        )
        .unwrap();
        let target = TargetDesign::new(
            constant_matrix(Matrix::identity(2, 2)),
            Arc::new(|q: &Vector| q[0].cos() + q[1] * q[1]),
            Arc::new(|_: &Vector, _: &Vector| Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])),
            Vector::zeros(2),
        )
        .unwrap()
        .with_constant_desired_mass();
        let gains = ControllerGains::identity(2);
        let s = ExtendedState::new(v(&[0.4, 0.1]), v(&[1.0, 2.0]), v(&[0.5, -0.5])).unwrap();
        let b = bracket_p41(&model, &target, &gains, &s).unwrap();
        assert!((pseudo_inverse_control_p41(&model, &target, &gains, &s).unwrap() - b).amax() < 1e-12);
        assert!(residual_p41(&model, &target, &gains, &s).unwrap().residual.is_empty());
    }

    #[test]
    fn p51_constant_md_pair_cancels_and_residual_is_nonzero() {
        let (model, target, gains) = iwp();
        let energy = AugmentedEnergy::from_target(&target);
        let states = sample_states(model.domain(), ControllerStateSampling::default(), 200, 8).unwrap();
        let mut nonzero = 0;
        for s in &states {
            let r = residual_p51(&model, &target, &gains, &energy, s).unwrap();
            let a = &r.components_by_term[2].annihilated;
            let b = &r.components_by_term[3].annihilated;
            assert!((a[0] + b[0]).abs() < 1e-15);
            if r.norm > 1e-4 {
                nonzero += 1;
            }
        }
        assert!(nonzero > 190);
    }

    #[test]
    fn p51_vanishes_at_equilibrium() {
        let (model, target, gains) = iwp();
        let energy = AugmentedEnergy::from_target(&target);
        let s = ExtendedState::at_rest(Vector::zeros(2), Vector::zeros(2)).unwrap();
        assert!(residual_p51(&model, &target, &gains, &energy, &s).unwrap().norm < 1e-10);
    }

    #[test]
    fn chain_is_an_identity_in_half_momentum_coordinates() {
        let (model, target, gains) = iwp();
        let energy = AugmentedEnergy::from_target(&target);
        let states = sample_states(model.domain(), ControllerStateSampling::Box { half_width: 1.0 }, 100, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for s in &states {
            let d1 = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let c = xq_dot_chain(&model, &target, &gains, &energy, s, &d1, MomentumCoordinate::Half).unwrap();
            assert!(c.max_pairwise_gap() < 1e-9, "{c:?}");
            assert!(c.deviation_mismatch() < 1e-9);
        }
    }

    #[test]
    fn chain_breaks_by_half_momentum_in_full_coordinates() {
        let (model, target, gains) = iwp();
        let energy = AugmentedEnergy::from_target(&target);
        let s = ExtendedState::new(v(&[0.2, 0.1]), v(&[0.7, -0.4]), v(&[0.3, 0.2])).unwrap();
        let c = xq_dot_chain(
            &model,
            &target,
            &gains,
            &energy,
            &s,
            &Vector::zeros(2),
            MomentumCoordinate::Full,
        )
        .unwrap();
        let half = model.mass_inverse(&s.q).unwrap() * &s.p * 0.5;
        for i in 0..2 {
            assert!((c.lines[0][i] - c.lines[1][i]).abs() < 1e-12);
            assert!((c.lines[2][i] - c.lines[1][i] - half[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_at_rest_is_zero() {
        let (model, target, gains) = iwp();
        let energy = AugmentedEnergy::from_target(&target);
        let s = ExtendedState::at_rest(Vector::zeros(2), Vector::zeros(2)).unwrap();
        let c = xq_dot_chain(
            &model,
            &target,
            &gains,
            &energy,
            &s,
            &Vector::zeros(2),
            MomentumCoordinate::Half,
        )
        .unwrap();
        assert!(c.lines.iter().flatten().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn chain_deviation_is_generically_nonzero() {
        let (model, target, gains) = iwp();
        let energy = AugmentedEnergy::from_target(&target);
        let s = ExtendedState::new(v(&[0.7, -0.3]), v(&[0.2, 0.1]), v(&[0.4, 0.2])).unwrap();
        let c = xq_dot_chain(
            &model,
            &target,
            &gains,
            &energy,
            &s,
            &Vector::zeros(2),
            MomentumCoordinate::Half,
        )
        .unwrap();
        assert!(c.deviation.iter().map(|x| x.abs()).fold(0.0, f64::max) > 1e-3);
    }

    #[test]
    fn witness_cases() {
        let model = MechanicalModel::new(
            "w",
            2,
            1,
            constant_matrix(Matrix::identity(2, 2)),
            Arc::new(|_| 0.0),
            constant_matrix(Matrix::from_column_slice(2, 1, &[0.0, 1.0])),
        )
        .unwrap();
        let unit = TargetDesign::new(
            constant_matrix(Matrix::identity(2, 2)),
            Arc::new(|_| 0.0),
            zero_j2(2),
            Vector::zeros(2),
        )
        .unwrap();
        let w = kernel_witness(&model, &unit, &Vector::zeros(2)).unwrap();
        assert!((w - v(&[1.0, 0.0])).amax() < 1e-15);

        let (model, target, _) = iwp();
        let q = Vector::zeros(2);
        let w = kernel_witness(&model, &target, &q).unwrap();
        let md = target.desired_mass(&q).unwrap();
        let expected = md.column(0) / md.column(0).norm();
        assert!((&w - expected).amax() < 1e-15);
        let y = model.input_map(&q).unwrap().transpose() * target.desired_mass_inverse(&q).unwrap() * &w;
        assert!(y.norm() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let n = rng.random_range(2..6);
            let m = rng.random_range(1..n);
            let g = random_matrix(&mut rng, n, m);
            let a = random_matrix(&mut rng, n, n);
            let md = &a * a.transpose() + Matrix::identity(n, n) * 0.1;
            let model = MechanicalModel::new(
                "r",
                n,
                m,
                constant_matrix(Matrix::identity(n, n)),
                Arc::new(|_| 0.0),
                constant_matrix(g.clone()),
            )
            .unwrap();
            let target = TargetDesign::new(
                constant_matrix(md.clone()),
                Arc::new(|_| 0.0),
                zero_j2(n),
                Vector::zeros(n),
            )
            .unwrap();
            let w = kernel_witness(&model, &target, &Vector::zeros(n)).unwrap();
            assert!((w.norm() - 1.0).abs() < 1e-12);
            assert!((g.transpose() * md.try_inverse().unwrap() * &w).norm() < 1e-10);
        }
    }

    #[test]
    fn witness_needs_underactuation() {
        let model = MechanicalModel::new(
            "fa",
            2,
            2,
            constant_matrix(Matrix::identity(2, 2)),
            Arc::new(|_| 0.0),
            constant_matrix(Matrix::identity(2, 2)),
        )
        .unwrap();
        let (_, target, _) = iwp();
        assert_eq!(kernel_witness(&model, &target, &Vector::zeros(2)), Err(Error::NoKernel));
    }

    #[test]
    fn bound_terms_without_disturbance() {
        let (model, target, gains) = iwp();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = DomainBox::default_for(2);
        for _ in 0..100 {
            let q = d.sample_q(&mut rng);
            let x_p = d.sample_p(&mut rng);
            let b = dissipation_bound_terms(&model, &target, &gains, &q, &x_p, &Vector::zeros(2)).unwrap();
            assert!(b.lhs_upper <= b.claimed_rhs + 1e-15);
            assert!(b.corrected_applicable);
        }
    }

    #[test]
    fn counterexample_along_the_witness() {
        let (model, target, gains) = iwp();
        let q = Vector::zeros(2);
        let c = young_counterexample(&model, &target, &gains, &q)
            .unwrap()
            .expect("violation");
        assert!(c.lhs_upper > c.claimed_rhs);
        let b = dissipation_bound_terms(&model, &target, &gains, &q, &v(&c.x_p), &v(&c.d2)).unwrap();
        assert!(!b.corrected_applicable);
        assert!(b.disputed_bound_violated());
    }

    #[test]
    fn matched_bound_holds() {
        let (model, target, gains) = iwp();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = DomainBox::default_for(2);
        for _ in 0..1000 {
            let q = d.sample_q(&mut rng);
            let x_p = d.sample_p(&mut rng) * 3.0;
            let dhat = v(&[rng.random_range(-2.0..2.0)]);
            assert!(matched_bound_gap(&model, &target, &gains, &q, &x_p, &dhat).unwrap() >= -1e-12);
            let g = model.input_map(&q).unwrap();
            let b = dissipation_bound_terms(&model, &target, &gains, &q, &x_p, &(g * &dhat)).unwrap();
            assert!(b.corrected_applicable);
        }
    }

    #[test]
    fn iiss_margin_cases() {
        let (model, target, gains) = iwp();
        let q = Vector::zeros(2);
        let w = kernel_witness(&model, &target, &q).unwrap();
        let point = IissPoint {
            q: q.clone(),
            x_p: w,
            d2hat: Vector::zeros(1),
            storage_rate: 0.0,
        };
        assert!(iiss_margin(&model, &target, &gains, &point).unwrap().abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = DomainBox::default_for(2);
        for _ in 0..100 {
            let q = d.sample_q(&mut rng);
            let x_p = d.sample_p(&mut rng);
            let y = model.input_map(&q).unwrap().transpose() * target.desired_mass_inverse(&q).unwrap() * &x_p;
            let point = IissPoint {
                q,
                x_p,
                d2hat: Vector::zeros(1),
                storage_rate: -weighted_sq_norm(&y, &gains.kv),
            };
            assert!(iiss_margin(&model, &target, &gains, &point).unwrap() >= 0.0);
        }
    }

    #[test]
    fn augmented_energy_gradients_match_finite_differences() {
        let (_, target, _) = structured_j2_system(4);
        let target = target.clone();
        let varying = TargetDesign::new(
            Arc::new(|q: &Vector| {
                let mut m = Matrix::identity(4, 4) * 3.0;
                m[(0, 0)] += q[1].sin();
                m
            }),
            Arc::new(|q: &Vector| (q[0] * 0.5).cos() + q[3] * q[3]),
            zero_j2(4),
            Vector::zeros(4),
        )
        .unwrap();
        for t in [&target, &varying] {
            for arg in [MdArgument::AtQ, MdArgument::AtXq] {
                let w = Matrix::from_diagonal(&v(&[1.0, 2.0, 0.5, 1.5]));
                let e = AugmentedEnergy::from_target(t)
                    .with_weight(w)
                    .unwrap()
                    .with_md_argument(arg);
                let xq = v(&[0.1, 0.5, -0.3, 0.2]);
                let xp = v(&[1.0, 0.2, -0.4, 0.3]);
                let xv = v(&[0.3, -0.2, 0.6, 0.1]);
                let s = crate::diffops::FiniteDifferenceScheme::central4(1e-3).unwrap();
                let gq = diffops::grad(|y| e.value(t, y, &xp, &xv).unwrap(), &xq, &s).unwrap();
                let gp = diffops::grad(|y| e.value(t, &xq, y, &xv).unwrap(), &xp, &s).unwrap();
                let gv = diffops::grad(|y| e.value(t, &xq, &xp, y).unwrap(), &xv, &s).unwrap();
                assert!((gq - e.grad_xq(t, &xq, &xp, &xv).unwrap()).amax() < 1e-6);
                assert!((gp - e.grad_xp(t, &xq, &xp, &xv).unwrap()).amax() < 1e-6);
                assert!((gv - e.grad_xv(t, &xq, &xp, &xv).unwrap()).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn augmented_weight_must_be_spd() {
        let (_, target, _) = iwp();
        assert!(AugmentedEnergy::from_target(&target)
            .with_weight(Matrix::zeros(2, 2))
            .is_err());
    }
}
