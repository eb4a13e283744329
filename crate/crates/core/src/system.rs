//! Domain types: the open-loop mechanical plant, the IDA-PBC target design,
//! controller gains, the extended (plant + integrator) state and disturbance
//! signals, together with sample-based validation of their invariants.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffops::{self, FiniteDifferenceScheme, RANK_TOLERANCE};
use crate::error::{check_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub type ScalarField = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
/// Map `(q, p) ↦ matrix`, used for the interconnection matrix `J2`.
pub type PhaseMatrixField = Arc<dyn Fn(&Vector, &Vector) -> Matrix + Send + Sync>;
pub type PhaseScalarField = Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>;
pub type TimeSignal = Arc<dyn Fn(f64) -> Vector + Send + Sync>;

pub const DEFAULT_SAMPLES: usize = 200;
pub const DEFAULT_SEED: u64 = 0;
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Relative floor for "strictly positive" eigenvalues.
pub const DEFINITENESS_TOLERANCE: f64 = 1e-12;
pub const EQUILIBRIUM_GRADIENT_TOLERANCE: f64 = 1e-8;
pub const HESSIAN_PSD_TOLERANCE: f64 = 1e-8;

fn definiteness_floor(a: &Matrix) -> f64 {
    DEFINITENESS_TOLERANCE * a.amax().max(1.0)
}

/// Axis-aligned sampling region for configurations, plus a symmetric
/// momentum box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub q_lower: Vec<f64>,
    pub q_upper: Vec<f64>,
    pub p_half_width: f64,
}

impl DomainBox {
    pub fn around(center: &Vector, q_half_width: f64, p_half_width: f64) -> Self {
        Self {
            q_lower: center.iter().map(|c| c - q_half_width).collect(),
            q_upper: center.iter().map(|c| c + q_half_width).collect(),
            p_half_width,
        }
    }

    /// Half-width π around the origin, momenta in [-1, 1].
    pub fn default_for(n: usize) -> Self {
        Self::around(&Vector::zeros(n), std::f64::consts::PI, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.q_lower.len()
    }

    pub fn center(&self) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.q_lower.iter().zip(&self.q_upper).map(|(a, b)| 0.5 * (a + b)),
        )
    }

    fn check(&self) -> Result<()> {
        if self.q_lower.len() != self.q_upper.len() || self.q_lower.is_empty() {
            return Err(Error::Construction(
                "domain box bounds have inconsistent lengths".into(),
            ));
        }
        let ok = self
            .q_lower
            .iter()
            .zip(&self.q_upper)
            .all(|(a, b)| a.is_finite() && b.is_finite() && a <= b)
            && self.p_half_width.is_finite()
            && self.p_half_width >= 0.0;
        if !ok {
            return Err(Error::Construction("domain box is empty or non-finite".into()));
        }
        Ok(())
    }

    pub fn sample_q<R: Rng>(&self, rng: &mut R) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.q_lower
                .iter()
                .zip(&self.q_upper)
                .map(|(&a, &b)| if a == b { a } else { rng.random_range(a..b) }),
        )
    }

    pub fn sample_p<R: Rng>(&self, rng: &mut R) -> Vector {
        let w = self.p_half_width;
        Vector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| if w == 0.0 { 0.0 } else { rng.random_range(-w..w) }),
        )
    }
}

/// Uniformly distributed direction scaled to a norm in `[r_min, r_max]`.
pub fn sample_shell<R: Rng>(rng: &mut R, n: usize, r_min: f64, r_max: f64) -> Vector {
    loop {
        let v = Vector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..1.0)));
        let norm = v.norm();
        if norm > 1e-3 && norm <= 1.0 {
            let r = if r_min == r_max {
                r_min
            } else {
                rng.random_range(r_min..r_max)
            };
            return v * (r / norm);
        }
    }
}

/// Open-loop port-Hamiltonian mechanical plant
/// `q̇ = ∇_pH, ṗ = -∇_qH + G(q)u` with `H = ½pᵀM⁻¹(q)p + V(q)`.
#[derive(Clone)]
pub struct MechanicalModel {
    name: String,
    n: usize,
    m: usize,
    mass: MatrixField,
    mass_constant: bool,
    potential: ScalarField,
    potential_gradient: Option<VectorField>,
    input_map: MatrixField,
    domain: DomainBox,
    scheme: FiniteDifferenceScheme,
}

impl fmt::Debug for MechanicalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MechanicalModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("mass_constant", &self.mass_constant)
            .field("analytic_potential_gradient", &self.potential_gradient.is_some())
            .finish()
    }
}

impl MechanicalModel {
    /// `m = n` is accepted so fully actuated control cases can be expressed;
    /// every annihilator-based quantity is then empty.
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        mass: MatrixField,
        potential: ScalarField,
        input_map: MatrixField,
    ) -> Result<Self> {
        if n == 0 || m == 0 || m > n {
            return Err(Error::Construction(format!("need 0 < m <= n, got n = {n}, m = {m}")));
        }
        let model = Self {
            name: name.into(),
            n,
            m,
            mass,
            mass_constant: false,
            potential,
            potential_gradient: None,
            input_map,
            domain: DomainBox::default_for(n),
            scheme: FiniteDifferenceScheme::default(),
        };
        let q0 = model.domain.center();
        let mass0 = (model.mass)(&q0);
        if mass0.shape() != (n, n) {
            return Err(Error::Construction(format!(
                "mass matrix is {:?}, expected ({n}, {n})",
                mass0.shape()
            )));
        }
        let g0 = (model.input_map)(&q0);
        if g0.shape() != (n, m) {
            return Err(Error::Construction(format!(
                "input map is {:?}, expected ({n}, {m})",
                g0.shape()
            )));
        }
        Ok(model)
    }

    pub fn with_constant_mass(mut self) -> Self {
        self.mass_constant = true;
        self
    }

    pub fn with_potential_gradient(mut self, gradient: VectorField) -> Self {
        self.potential_gradient = Some(gradient);
        self
    }

    pub fn with_domain(mut self, domain: DomainBox) -> Result<Self> {
        domain.check()?;
        check_dim("domain box", self.n, domain.dim())?;
        self.domain = domain;
        Ok(self)
    }

    pub fn with_scheme(mut self, scheme: FiniteDifferenceScheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Replace the input map, e.g. to study a fully actuated variant.
    pub fn with_input_map(mut self, m: usize, input_map: MatrixField) -> Result<Self> {
        if m == 0 || m > self.n {
            return Err(Error::Construction(format!("need 0 < m <= n, got m = {m}")));
        }
        let g0 = input_map(&self.domain.center());
        if g0.shape() != (self.n, m) {
            return Err(Error::Construction(format!(
                "input map is {:?}, expected ({}, {m})",
                g0.shape(),
                self.n
            )));
        }
        self.m = m;
        self.input_map = input_map;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn is_underactuated(&self) -> bool {
        self.m < self.n
    }

    pub fn mass_is_constant(&self) -> bool {
        self.mass_constant
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn scheme(&self) -> &FiniteDifferenceScheme {
        &self.scheme
    }

    pub fn mass(&self, q: &Vector) -> Result<Matrix> {
        check_dim("configuration", self.n, q.len())?;
        Ok((self.mass)(q))
    }

    pub fn mass_inverse(&self, q: &Vector) -> Result<Matrix> {
        diffops::inverse(&self.mass(q)?)
    }

    pub fn potential(&self, q: &Vector) -> Result<f64> {
        check_dim("configuration", self.n, q.len())?;
        Ok((self.potential)(q))
    }

    pub fn potential_gradient(&self, q: &Vector) -> Result<Vector> {
        check_dim("configuration", self.n, q.len())?;
        match &self.potential_gradient {
            Some(g) => Ok(g(q)),
            None => diffops::grad(|x| (self.potential)(x), q, &self.scheme),
        }
    }

    pub fn input_map(&self, q: &Vector) -> Result<Matrix> {
        check_dim("configuration", self.n, q.len())?;
        Ok((self.input_map)(q))
    }

    pub fn annihilator(&self, q: &Vector) -> Result<Matrix> {
        diffops::left_annihilator(&self.input_map(q)?)
    }

    /// `∇_q` of the kinetic energy `½pᵀM⁻¹(q)p`.
    pub fn kinetic_gradient(&self, q: &Vector, p: &Vector) -> Result<Vector> {
        check_dim("momentum", self.n, p.len())?;
        if self.mass_constant {
            return Ok(Vector::zeros(self.n));
        }
        diffops::grad(
            |x| match diffops::inverse(&(self.mass)(x)) {
                Ok(inv) => 0.5 * p.dot(&(inv * p)),
                Err(_) => f64::NAN,
            },
            q,
            &self.scheme,
        )
    }
}

/// IDA-PBC target: desired inertia `Md(q)`, desired potential `Vd(q)`,
/// free skew-symmetric `J2(q, p)` and the equilibrium `q*`.
#[derive(Clone)]
pub struct TargetDesign {
    desired_mass: MatrixField,
    desired_mass_constant: bool,
    desired_potential: ScalarField,
    desired_potential_gradient: Option<VectorField>,
    j2: PhaseMatrixField,
    q_star: Vector,
    scheme: FiniteDifferenceScheme,
}

impl fmt::Debug for TargetDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TargetDesign")
            .field("desired_mass_constant", &self.desired_mass_constant)
            .field("q_star", &self.q_star.as_slice())
            .finish()
    }
}

impl TargetDesign {
    pub fn new(
        desired_mass: MatrixField,
        desired_potential: ScalarField,
        j2: PhaseMatrixField,
        q_star: Vector,
    ) -> Result<Self> {
        let n = q_star.len();
        if n == 0 {
            return Err(Error::Construction("q* must be nonempty".into()));
        }
        let md = desired_mass(&q_star);
        if md.shape() != (n, n) {
            return Err(Error::Construction(format!(
                "desired mass is {:?}, expected ({n}, {n})",
                md.shape()
            )));
        }
        let j = j2(&q_star, &Vector::zeros(n));
        if j.shape() != (n, n) {
            return Err(Error::Construction(format!(
                "J2 is {:?}, expected ({n}, {n})",
                j.shape()
            )));
        }
        Ok(Self {
            desired_mass,
            desired_mass_constant: false,
            desired_potential,
            desired_potential_gradient: None,
            j2,
            q_star,
            scheme: FiniteDifferenceScheme::default(),
        })
    }

    /// Declares `Md` independent of `q`; its derivatives are then exactly zero.
    pub fn with_constant_desired_mass(mut self) -> Self {
        self.desired_mass_constant = true;
        self
    }

    pub fn with_potential_gradient(mut self, gradient: VectorField) -> Self {
        self.desired_potential_gradient = Some(gradient);
        self
    }

    pub fn with_j2(mut self, j2: PhaseMatrixField) -> Self {
        self.j2 = j2;
        self
    }

    pub fn with_scheme(mut self, scheme: FiniteDifferenceScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn n(&self) -> usize {
        self.q_star.len()
    }

    pub fn q_star(&self) -> &Vector {
        &self.q_star
    }

    pub fn desired_mass_is_constant(&self) -> bool {
        self.desired_mass_constant
    }

    pub fn scheme(&self) -> &FiniteDifferenceScheme {
        &self.scheme
    }

    pub fn desired_mass(&self, q: &Vector) -> Result<Matrix> {
        check_dim("configuration", self.n(), q.len())?;
        Ok((self.desired_mass)(q))
    }

    pub fn desired_mass_inverse(&self, q: &Vector) -> Result<Matrix> {
        diffops::inverse(&self.desired_mass(q)?)
    }

    pub fn desired_potential(&self, q: &Vector) -> Result<f64> {
        check_dim("configuration", self.n(), q.len())?;
        Ok((self.desired_potential)(q))
    }

    pub fn desired_potential_gradient(&self, q: &Vector) -> Result<Vector> {
        check_dim("configuration", self.n(), q.len())?;
        match &self.desired_potential_gradient {
            Some(g) => Ok(g(q)),
            None => diffops::grad(|x| (self.desired_potential)(x), q, &self.scheme),
        }
    }

    pub fn j2(&self, q: &Vector, p: &Vector) -> Result<Matrix> {
        check_dim("configuration", self.n(), q.len())?;
        check_dim("momentum", self.n(), p.len())?;
        Ok((self.j2)(q, p))
    }

    /// `∇_q(½xᵀMd⁻¹(q)x)` with `x` held fixed.
    pub fn quadratic_gradient(&self, q: &Vector, x: &Vector) -> Result<Vector> {
        check_dim("momentum", self.n(), x.len())?;
        if self.desired_mass_constant {
            return Ok(Vector::zeros(self.n()));
        }
        diffops::grad(
            |y| match diffops::inverse(&(self.desired_mass)(y)) {
                Ok(inv) => 0.5 * x.dot(&(inv * x)),
                Err(_) => f64::NAN,
            },
            q,
            &self.scheme,
        )
    }
}

/// Symmetric positive definite gains: `Kp` (energy-shaping damping), `Kv`
/// (damping injection) and `Ki` (integral action), all m x m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub kp: Matrix,
    pub kv: Matrix,
    pub ki: Matrix,
}

impl ControllerGains {
    pub fn new(kp: Matrix, kv: Matrix, ki: Matrix) -> Result<Self> {
        let gains = Self::new_unchecked(kp, kv, ki);
        gains.validate()?;
        Ok(gains)
    }

    /// Skips the definiteness checks; for degenerate studies such as zero
    /// integral gain.
    pub fn new_unchecked(kp: Matrix, kv: Matrix, ki: Matrix) -> Self {
        Self { kp, kv, ki }
    }

    pub fn scalar(kp: f64, kv: f64, ki: f64) -> Result<Self> {
        Self::new(
            Matrix::from_element(1, 1, kp),
            Matrix::from_element(1, 1, kv),
            Matrix::from_element(1, 1, ki),
        )
    }

    pub fn identity(m: usize) -> Self {
        Self::new_unchecked(Matrix::identity(m, m), Matrix::identity(m, m), Matrix::identity(m, m))
    }

    pub fn m(&self) -> usize {
        self.kp.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.kp.nrows();
        for (name, k) in [("Kp", &self.kp), ("Kv", &self.kv), ("Ki", &self.ki)] {
            if k.shape() != (m, m) {
                return Err(Error::Construction(format!(
                    "{name} is {:?}, expected ({m}, {m})",
                    k.shape()
                )));
            }
            if k.iter().any(|v| !v.is_finite()) {
                return Err(Error::Construction(format!("{name} has non-finite entries")));
            }
            if diffops::asymmetry(k) >= SYMMETRY_TOLERANCE {
                return Err(Error::Construction(format!("{name} is not symmetric")));
            }
            if diffops::min_symmetric_eigenvalue(k) <= 0.0 {
                return Err(Error::Construction(format!("{name} is not positive definite")));
            }
        }
        Ok(())
    }
}

/// Plant state extended with the controller state `x_v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedState {
    pub q: Vector,
    pub p: Vector,
    pub x_v: Vector,
}

impl ExtendedState {
    pub fn new(q: Vector, p: Vector, x_v: Vector) -> Result<Self> {
        check_dim("momentum", q.len(), p.len())?;
        check_dim("controller state", q.len(), x_v.len())?;
        Ok(Self { q, p, x_v })
    }

    pub fn at_rest(q: Vector, p: Vector) -> Result<Self> {
        let n = q.len();
        Self::new(q, p, Vector::zeros(n))
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    /// `x_q = q - x_v`.
    pub fn x_q(&self) -> Vector {
        &self.q - &self.x_v
    }

    /// `x_p = p + κ x_v`.
    pub fn x_p(&self, kappa: &Matrix) -> Result<Vector> {
        check_dim("kappa rows", self.n(), kappa.nrows())?;
        check_dim("kappa columns", self.n(), kappa.ncols())?;
        Ok(&self.p + kappa * &self.x_v)
    }

    pub fn extended_coords(&self, kappa: &Matrix) -> Result<(Vector, Vector)> {
        Ok((self.x_q(), self.x_p(kappa)?))
    }

    /// Inverse of [`ExtendedState::extended_coords`].
    pub fn from_extended(x_q: &Vector, x_p: &Vector, x_v: Vector, kappa: &Matrix) -> Result<Self> {
        check_dim("kappa", x_v.len(), kappa.nrows())?;
        let q = x_q + &x_v;
        let p = x_p - kappa * &x_v;
        Self::new(q, p, x_v)
    }

    /// Stacked `(q, p, x_v)`.
    pub fn to_vector(&self) -> Vector {
        let n = self.n();
        let mut v = Vector::zeros(3 * n);
        v.rows_mut(0, n).copy_from(&self.q);
        v.rows_mut(n, n).copy_from(&self.p);
        v.rows_mut(2 * n, n).copy_from(&self.x_v);
        v
    }

    pub fn from_vector(v: &Vector) -> Result<Self> {
        if !v.len().is_multiple_of(3) || v.is_empty() {
            return Err(Error::Contract(format!("stacked state length {} is not 3n", v.len())));
        }
        let n = v.len() / 3;
        Self::new(v.rows(0, n).into(), v.rows(n, n).into(), v.rows(2 * n, n).into())
    }
}

/// Additive disturbances `d1` (q̇-row), `d2` (ṗ-row) and an optional
/// matched component `d̂2` entering as `G d̂2`.
#[derive(Clone)]
pub struct DisturbanceProfile {
    pub d1: TimeSignal,
    pub d2: TimeSignal,
    pub matched_d2hat: Option<TimeSignal>,
}

impl fmt::Debug for DisturbanceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DisturbanceProfile")
            .field("matched", &self.matched_d2hat.is_some())
            .finish()
    }
}

impl DisturbanceProfile {
    pub fn zero(n: usize) -> Self {
        Self {
            d1: Arc::new(move |_| Vector::zeros(n)),
            d2: Arc::new(move |_| Vector::zeros(n)),
            matched_d2hat: None,
        }
    }

    /// Purely matched disturbance `d2 = G d̂2(t)`.
    pub fn matched(n: usize, d2hat: TimeSignal) -> Self {
        Self {
            matched_d2hat: Some(d2hat),
            ..Self::zero(n)
        }
    }

    /// `(d1(t), d2(t) + G d̂2(t))`.
    pub fn evaluate(&self, t: f64, g: &Matrix) -> Result<(Vector, Vector)> {
        let d1 = (self.d1)(t);
        let mut d2 = (self.d2)(t);
        check_dim("d1", g.nrows(), d1.len())?;
        check_dim("d2", g.nrows(), d2.len())?;
        if let Some(hat) = &self.matched_d2hat {
            let h = hat(t);
            check_dim("matched disturbance", g.ncols(), h.len())?;
            d2 += g * h;
        }
        Ok((d1, d2))
    }

    /// Largest component magnitude over `samples + 1` equispaced times in
    /// `[t0, t1]`; errors on any non-finite value.
    pub fn sup_norm(&self, t0: f64, t1: f64, samples: usize) -> Result<f64> {
        let mut sup = 0.0f64;
        for k in 0..=samples {
            let t = t0 + (t1 - t0) * k as f64 / samples.max(1) as f64;
            let mut signals = vec![(self.d1)(t), (self.d2)(t)];
            if let Some(h) = &self.matched_d2hat {
                signals.push(h(t));
            }
            for s in signals {
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Evaluation {
                        what: "disturbance".into(),
                        point: vec![t],
                    });
                }
                sup = sup.max(s.amax());
            }
        }
        Ok(sup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    /// Distance to violation at the worst sample; negative when violated.
    pub worst_margin: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<InvariantCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, worst_margin: f64) {
        self.checks.push(InvariantCheck {
            name: name.to_string(),
            passed: worst_margin > 0.0,
            worst_margin,
        });
    }
}

fn finite_or_fail(what: &str, m: &Matrix, q: &Vector) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation {
            what: what.into(),
            point: q.iter().copied().collect(),
        })
    }
}

fn spd_margins(a: &Matrix) -> (f64, f64) {
    let sym = SYMMETRY_TOLERANCE - diffops::asymmetry(a);
    let pd = diffops::min_symmetric_eigenvalue(a) - definiteness_floor(a);
    (sym, pd)
}

/// Checks symmetry and definiteness of `M` and the rank of `G` on `samples`
/// configurations drawn from the model's domain box.
pub fn validate_model(model: &MechanicalModel, samples: usize, seed: u64) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::Contract("validation needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sym, mut pd, mut rank) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for _ in 0..samples {
        let q = model.domain().sample_q(&mut rng);
        let mass = model.mass(&q)?;
        finite_or_fail("mass matrix", &mass, &q)?;
        let g = model.input_map(&q)?;
        finite_or_fail("input map", &g, &q)?;
        let v = model.potential(&q)?;
        if !v.is_finite() {
            return Err(Error::Evaluation {
                what: "potential".into(),
                point: q.iter().copied().collect(),
            });
        }
        let (s, d) = spd_margins(&mass);
        sym = sym.min(s);
        pd = pd.min(d);
        let smallest = diffops::singular_values(&g).last().copied().unwrap_or(0.0);
        rank = rank.min(smallest - RANK_TOLERANCE);
    }
    let mut report = ValidationReport::default();
    report.push("mass symmetric", sym);
    report.push("mass positive definite", pd);
    report.push("input map full rank", rank);
    Ok(report)
}

/// Checks `Md` SPD and `J2` skew on sampled states, and that `q*` is a
/// critical point of `Vd` with positive semidefinite Hessian.
pub fn validate_target(
    model: &MechanicalModel,
    target: &TargetDesign,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::Contract("validation needs at least one sample".into()));
    }
    check_dim("target dimension", model.n(), target.n())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sym, mut pd, mut skew) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for _ in 0..samples {
        let q = model.domain().sample_q(&mut rng);
        let p = model.domain().sample_p(&mut rng);
        let md = target.desired_mass(&q)?;
        finite_or_fail("desired mass", &md, &q)?;
        let j2 = target.j2(&q, &p)?;
        finite_or_fail("J2", &j2, &q)?;
        let (s, d) = spd_margins(&md);
        sym = sym.min(s);
        pd = pd.min(d);
        skew = skew.min(SYMMETRY_TOLERANCE - diffops::skewness_defect(&j2));
    }
    let q_star = target.q_star();
    let gradient = diffops::grad(|x| (target.desired_potential)(x), q_star, target.scheme())?;
    let hessian = desired_potential_hessian(target)?;
    let mut report = ValidationReport::default();
    report.push("desired mass symmetric", sym);
    report.push("desired mass positive definite", pd);
    report.push("J2 skew-symmetric", skew);
    report.push("Vd critical at q*", EQUILIBRIUM_GRADIENT_TOLERANCE - gradient.amax());
    report.push(
        "Vd Hessian PSD at q*",
        diffops::min_symmetric_eigenvalue(&hessian) + HESSIAN_PSD_TOLERANCE,
    );
    Ok(report)
}

/// Second central differences of `Vd` at `q*`.
pub fn desired_potential_hessian(target: &TargetDesign) -> Result<Matrix> {
    let n = target.n();
    let h = 1e-4;
    let x = target.q_star();
    let f = |y: &Vector| target.desired_potential(y);
    let mut hess = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let at = |di: f64, dj: f64| -> Result<f64> {
                let mut y = x.clone();
                y[i] += di;
                y[j] += dj;
                f(&y)
            };
            hess[(i, j)] = (at(h, h)? - at(h, -h)? - at(-h, h)? + at(-h, -h)?) / (4.0 * h * h);
        }
    }
    if hess.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation {
            what: "desired potential Hessian".into(),
            point: x.iter().copied().collect(),
        });
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

pub fn constant_matrix(m: Matrix) -> MatrixField {
    Arc::new(move |_| m.clone())
}

pub fn zero_j2(n: usize) -> PhaseMatrixField {
    Arc::new(move |_, _| Matrix::zeros(n, n))
}
