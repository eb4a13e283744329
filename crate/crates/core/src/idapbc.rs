//! Classical IDA-PBC quantities: energies, the target vector field, the
//! power balance `Ḣd = -‖GᵀMd⁻¹p‖²_Kp`, feasibility of the ṗ-row matching
//! equation and the static control law that solves it.

use serde::{Deserialize, Serialize};

use crate::diffops::{self, weighted_sq_norm};
use crate::error::{check_dim, Error, Result};
use crate::system::{ControllerGains, Matrix, MechanicalModel, TargetDesign, Vector};

/// Annihilated residuals below this are treated as "matching holds".
pub const FEASIBILITY_TOLERANCE: f64 = 1e-6;
/// Upper edge of the warning band that starts at the feasibility tolerance.
pub const WARNING_BAND: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchingStatus {
    Holds,
    Warning,
    Fails,
}

impl MatchingStatus {
    pub fn classify(residual_norm: f64, tolerance: f64) -> Self {
        if residual_norm < tolerance {
            Self::Holds
        } else if residual_norm < WARNING_BAND.max(tolerance) {
            Self::Warning
        } else {
            Self::Fails
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Open-loop energy `H`.
    pub h: f64,
    /// Shaped energy `Hd` (or the augmented energy, for extended loops).
    pub hd: f64,
    /// Dissipation output `GᵀMd⁻¹p`.
    pub y_d: Vec<f64>,
    /// `-‖y_d‖²` in the damping gain of the loop.
    pub hd_dot_analytic: f64,
}

fn check_state(model: &MechanicalModel, q: &Vector, p: &Vector) -> Result<()> {
    check_dim("configuration", model.n(), q.len())?;
    check_dim("momentum", model.n(), p.len())
}

pub fn total_energy(model: &MechanicalModel, q: &Vector, p: &Vector) -> Result<f64> {
    check_state(model, q, p)?;
    let minv = model.mass_inverse(q)?;
    Ok(0.5 * weighted_sq_norm(p, &minv) + model.potential(q)?)
}

pub fn desired_energy(target: &TargetDesign, q: &Vector, p: &Vector) -> Result<f64> {
    check_dim("momentum", target.n(), p.len())?;
    let mdinv = target.desired_mass_inverse(q)?;
    Ok(0.5 * weighted_sq_norm(p, &mdinv) + target.desired_potential(q)?)
}

/// `∇_qH`.
pub fn energy_gradient_q(model: &MechanicalModel, q: &Vector, p: &Vector) -> Result<Vector> {
    Ok(model.kinetic_gradient(q, p)? + model.potential_gradient(q)?)
}

/// `∇_qHd`.
pub fn desired_energy_gradient_q(target: &TargetDesign, q: &Vector, p: &Vector) -> Result<Vector> {
    Ok(target.quadratic_gradient(q, p)? + target.desired_potential_gradient(q)?)
}

/// `y_d = GᵀMd⁻¹p`.
pub fn dissipation_output(model: &MechanicalModel, target: &TargetDesign, q: &Vector, p: &Vector) -> Result<Vector> {
    check_state(model, q, p)?;
    Ok(model.input_map(q)?.transpose() * target.desired_mass_inverse(q)? * p)
}

/// Right-hand side of the closed loop `ẋ = Fd ∇Hd` with
/// `Fd = [[0, M⁻¹Md], [-MdM⁻¹, J2 - GKpGᵀ]]`.
pub fn target_vector_field(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    q: &Vector,
    p: &Vector,
) -> Result<(Vector, Vector)> {
    check_state(model, q, p)?;
    let minv = model.mass_inverse(q)?;
    let md = target.desired_mass(q)?;
    let mdinv = target.desired_mass_inverse(q)?;
    let g = model.input_map(q)?;
    check_dim("Kp", g.ncols(), gains.kp.nrows())?;
    let grad_p = &mdinv * p;
    let grad_q = desired_energy_gradient_q(target, q, p)?;
    let q_dot = &minv * &md * &grad_p;
    let damping = &g * &gains.kp * g.transpose();
    let p_dot = -(&md * &minv * grad_q) + (target.j2(q, p)? - damping) * grad_p;
    Ok((q_dot, p_dot))
}

/// Open-loop plant `q̇ = M⁻¹p, ṗ = -∇_qH + Gu`.
pub fn plant_vector_field(model: &MechanicalModel, q: &Vector, p: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
    check_state(model, q, p)?;
    check_dim("control", model.m(), u.len())?;
    let q_dot = model.mass_inverse(q)? * p;
    let p_dot = -energy_gradient_q(model, q, p)? + model.input_map(q)? * u;
    Ok((q_dot, p_dot))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBalance {
    /// `∇Hd · ẋ` with `∇Hd` from central differences over `(q, p)`.
    pub hd_dot_fd: f64,
    /// `-‖GᵀMd⁻¹p‖²_Kp`.
    pub minus_dissipation: f64,
}

impl PowerBalance {
    /// Mixed absolute/relative discrepancy `|a - b| / max(|b|, 1)`.
    pub fn relative_error(&self) -> f64 {
        (self.hd_dot_fd - self.minus_dissipation).abs() / self.minus_dissipation.abs().max(1.0)
    }
}

pub fn power_balance(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    q: &Vector,
    p: &Vector,
) -> Result<PowerBalance> {
    let n = model.n();
    let (q_dot, p_dot) = target_vector_field(model, target, gains, q, p)?;
    let mut x = Vector::zeros(2 * n);
    x.rows_mut(0, n).copy_from(q);
    x.rows_mut(n, n).copy_from(p);
    let hd = |z: &Vector| {
        let qz: Vector = z.rows(0, n).into();
        let pz: Vector = z.rows(n, n).into();
        desired_energy(target, &qz, &pz).unwrap_or(f64::NAN)
    };
    let grad = diffops::grad(hd, &x, target.scheme())?;
    let hd_dot_fd = grad.rows(0, n).dot(&q_dot) + grad.rows(n, n).dot(&p_dot);
    let y = dissipation_output(model, target, q, p)?;
    Ok(PowerBalance {
        hd_dot_fd,
        minus_dissipation: -weighted_sq_norm(&y, &gains.kp),
    })
}

/// `∇_qH - MdM⁻¹∇_qHd + J2Md⁻¹p`: what `Gu` has to equal in the ṗ row.
pub fn matching_bracket_basic(
    model: &MechanicalModel,
    target: &TargetDesign,
    q: &Vector,
    p: &Vector,
) -> Result<Vector> {
    check_state(model, q, p)?;
    let minv = model.mass_inverse(q)?;
    let md = target.desired_mass(q)?;
    let mdinv = target.desired_mass_inverse(q)?;
    Ok(
        energy_gradient_q(model, q, p)? - &md * &minv * desired_energy_gradient_q(target, q, p)?
            + target.j2(q, p)? * mdinv * p,
    )
}

/// `G⊥{∇_qH - MdM⁻¹∇_qHd + J2Md⁻¹p}`; vanishes iff the static IDA-PBC
/// control exists at `(q, p)`. Empty when fully actuated.
pub fn matching_residual_basic(
    model: &MechanicalModel,
    target: &TargetDesign,
    q: &Vector,
    p: &Vector,
) -> Result<Vector> {
    let b = matching_bracket_basic(model, target, q, p)?;
    Ok(model.annihilator(q)? * b)
}

/// `u = G⁺{∇_qH - MdM⁻¹∇_qHd + J2Md⁻¹p} - KpGᵀMd⁻¹p`, after checking the
/// annihilated residual against `tolerance`.
pub fn ida_pbc_control(
    model: &MechanicalModel,
    target: &TargetDesign,
    gains: &ControllerGains,
    q: &Vector,
    p: &Vector,
    tolerance: f64,
) -> Result<Vector> {
    let b = matching_bracket_basic(model, target, q, p)?;
    let g = model.input_map(q)?;
    let residual = diffops::left_annihilator(&g)? * &b;
    if residual.norm() >= tolerance {
        return Err(Error::InfeasibleMatching {
            residual: residual.iter().copied().collect(),
        });
    }
    check_dim("Kp", g.ncols(), gains.kp.nrows())?;
    let mdinv = target.desired_mass_inverse(q)?;
    Ok(diffops::pseudo_inverse_tall(&g)? * b - &gains.kp * g.transpose() * mdinv * p)
}

pub fn energy_report(
    model: &MechanicalModel,
    target: &TargetDesign,
    damping_gain: &Matrix,
    q: &Vector,
    p: &Vector,
) -> Result<EnergyReport> {
    let y = dissipation_output(model, target, q, p)?;
    Ok(EnergyReport {
        h: total_energy(model, q, p)?,
        hd: desired_energy(target, q, p)?,
        hd_dot_analytic: -weighted_sq_norm(&y, damping_gain),
        y_d: y.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_iwp, IwpParams};
    use crate::system::{constant_matrix, zero_j2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// M = Md = I, G = I, Vd = ½|q - q*|², V = ½|q|²·c.
    fn fully_actuated(kappa: f64) -> (MechanicalModel, TargetDesign, ControllerGains) {
        let n = 2;
        let q_star = Vector::from_vec(vec![0.5, -0.25]);
        let model = MechanicalModel::new(
            "fully actuated",
            n,
            n,
            constant_matrix(Matrix::identity(n, n)),
            Arc::new(|q: &Vector| 0.7 * q.norm_squared()),
            constant_matrix(Matrix::identity(n, n)),
        )
        .unwrap()
        .with_constant_mass();
        let qs = q_star.clone();
        let target = TargetDesign::new(
            constant_matrix(Matrix::identity(n, n)),
            Arc::new(move |q: &Vector| 0.5 * (q - &qs).norm_squared()),
            zero_j2(n),
            q_star,
        )
        .unwrap()
        .with_constant_desired_mass();
        let k = Matrix::identity(n, n) * kappa;
        (model, target, ControllerGains::new(k.clone(), k.clone(), k).unwrap())
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    #[test]
    fn energies() {
        let (model, target, _) = build_iwp(&IwpParams::default()).unwrap();
        let k3 = IwpParams::default().k3;
        let q = v(&[0.4, -1.0]);
        assert_eq!(
            total_energy(&model, &q, &Vector::zeros(2)).unwrap(),
            model.potential(&q).unwrap()
        );
        assert!(
            total_energy(&model, &v(&[std::f64::consts::PI, 0.0]), &Vector::zeros(2))
                .unwrap()
                .abs()
                < 1e-15
        );
        let gamma1 = IwpParams::default().gamma1;
        assert!((desired_energy(&target, &Vector::zeros(2), &Vector::zeros(2)).unwrap() + k3 * gamma1).abs() < 1e-15);

        let two = MechanicalModel::new(
            "2I",
            2,
            1,
            constant_matrix(Matrix::identity(2, 2) * 2.0),
            Arc::new(|_| 0.0),
            constant_matrix(Matrix::identity(2, 1)),
        )
        .unwrap();
        assert!((total_energy(&two, &Vector::zeros(2), &v(&[2.0, 0.0])).unwrap() - 1.0).abs() < 1e-15);

        let unit = TargetDesign::new(
            constant_matrix(Matrix::identity(2, 2)),
            Arc::new(|_| 0.0),
            zero_j2(2),
            Vector::zeros(2),
        )
        .unwrap();
        assert!((desired_energy(&unit, &Vector::zeros(2), &v(&[3.0, 4.0])).unwrap() - 12.5).abs() < 1e-15);
    }

    #[test]
    fn target_field_at_equilibrium_is_zero() {
        let (model, target, gains) = build_iwp(&IwpParams::default()).unwrap();
        let (qd, pd) = target_vector_field(&model, &target, &gains, target.q_star(), &Vector::zeros(2)).unwrap();
        assert!(qd.amax() < 1e-15 && pd.amax() < 1e-12);
    }

    #[test]
    fn fully_actuated_target_field() {
        let kappa = 3.0;
        let (model, target, gains) = fully_actuated(kappa);
        let q = v(&[1.0, 2.0]);
        let p = v(&[-0.5, 0.3]);
        let (qd, pd) = target_vector_field(&model, &target, &gains, &q, &p).unwrap();
        assert!((qd - &p).amax() < 1e-15);
        let expected = -(&q - target.q_star()) - &p * kappa;
        assert!((pd - expected).amax() < 1e-8);
    }

    #[test]
    fn iwp_target_field_matches_block_assembly() {
        let (model, target, gains) = build_iwp(&IwpParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q = model.domain().sample_q(&mut rng);
            let p = model.domain().sample_p(&mut rng);
            let (qd, pd) = target_vector_field(&model, &target, &gains, &q, &p).unwrap();
            // Fd as a 4x4 block matrix times the stacked gradient
            let minv = model.mass_inverse(&q).unwrap();
            let md = target.desired_mass(&q).unwrap();
            let g = model.input_map(&q).unwrap();
            let mut fd = Matrix::zeros(4, 4);
            fd.view_mut((0, 2), (2, 2)).copy_from(&(&minv * &md));
            fd.view_mut((2, 0), (2, 2)).copy_from(&(-(&md * &minv)));
            fd.view_mut((2, 2), (2, 2))
                .copy_from(&(-(&g * &gains.kp * g.transpose())));
            let mut grad = Vector::zeros(4);
            grad.rows_mut(0, 2)
                .copy_from(&target.desired_potential_gradient(&q).unwrap());
            grad.rows_mut(2, 2)
                .copy_from(&(target.desired_mass_inverse(&q).unwrap() * &p));
            let expected = fd * grad;
            assert!((qd - expected.rows(0, 2)).amax() < 1e-9);
            assert!((pd - expected.rows(2, 2)).amax() < 1e-9);
        }
    }

    #[test]
    fn power_balance_cases() {
        let (model, target, gains) = build_iwp(&IwpParams::default()).unwrap();
        let pb = power_balance(&model, &target, &gains, &v(&[0.3, 1.0]), &Vector::zeros(2)).unwrap();
        assert!(pb.hd_dot_fd.abs() < 1e-9 && pb.minus_dissipation == 0.0);

        // p with GᵀMd⁻¹p = 0: p = Md e1
        let p = target.desired_mass(&Vector::zeros(2)).unwrap().column(0).into_owned();
        let pb = power_balance(&model, &target, &gains, &v(&[0.3, 1.0]), &p).unwrap();
        assert!(pb.minus_dissipation.abs() < 1e-15);
        assert!(pb.hd_dot_fd.abs() < 1e-7);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = model.domain().sample_q(&mut rng);
            let p = model.domain().sample_p(&mut rng);
            let pb = power_balance(&model, &target, &gains, &q, &p).unwrap();
            assert!(pb.minus_dissipation <= 0.0);
            assert!(pb.relative_error() < 1e-6, "{pb:?}");
        }
    }

    #[test]
    fn skew_interconnection_does_not_dissipate() {
        let (_, target, _) = build_iwp(&IwpParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = DomainSample::q(&mut rng);
            let p = DomainSample::q(&mut rng);
            let j = Matrix::from_row_slice(2, 2, &[0.0, q[0].sin() + 2.0, -(q[0].sin() + 2.0), 0.0]);
            let mdinv = target.desired_mass_inverse(&q).unwrap();
            let w = &mdinv * &p;
            assert!(w.dot(&(j * &w)).abs() < 1e-10);
        }
    }

    struct DomainSample;
    impl DomainSample {
        fn q(rng: &mut ChaCha8Rng) -> Vector {
            crate::system::DomainBox::default_for(2).sample_q(rng)
        }
    }

    #[test]
    fn basic_residual_cases() {
        let (model, target, _) = fully_actuated(1.0);
        assert_eq!(
            matching_residual_basic(&model, &target, &v(&[0.1, 0.2]), &v(&[1.0, 1.0]))
                .unwrap()
                .len(),
            0
        );

        let (model, target, _) = build_iwp(&IwpParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q = model.domain().sample_q(&mut rng);
            let p = model.domain().sample_p(&mut rng);
            assert!(matching_residual_basic(&model, &target, &q, &p).unwrap().norm() < 1e-6);
        }
    }

    #[test]
    fn corrupted_potential_breaks_matching() {
        let params = IwpParams::default();
        let (model, target, _) = build_iwp(&params).unwrap();
        let base = target.clone();
        let corrupted = TargetDesign::new(
            Arc::new(move |q: &Vector| base.desired_mass(q).unwrap()),
            {
                let t = target.clone();
                Arc::new(move |q: &Vector| t.desired_potential(q).unwrap() + q[1] * q[1])
            },
            zero_j2(2),
            Vector::zeros(2),
        )
        .unwrap()
        .with_constant_desired_mass();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0;
        for _ in 0..100 {
            let q = model.domain().sample_q(&mut rng);
            let p = model.domain().sample_p(&mut rng);
            if matching_residual_basic(&model, &corrupted, &q, &p).unwrap().norm() > 1e-3 {
                hits += 1;
            }
        }
        assert!(hits > 95, "{hits}");
    }

    #[test]
    fn control_closes_the_loop() {
        let (model, target, gains) = build_iwp(&IwpParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let q = model.domain().sample_q(&mut rng);
            let p = model.domain().sample_p(&mut rng);
            let u = ida_pbc_control(&model, &target, &gains, &q, &p, FEASIBILITY_TOLERANCE).unwrap();
            let (qa, pa) = plant_vector_field(&model, &q, &p, &u).unwrap();
            let (qb, pb) = target_vector_field(&model, &target, &gains, &q, &p).unwrap();
            assert!((qa - qb).amax() < 1e-8);
            assert!((pa - pb).amax() < 1e-8);
        }
        let u = ida_pbc_control(
            &model,
            &target,
            &gains,
            &Vector::zeros(2),
            &Vector::zeros(2),
            FEASIBILITY_TOLERANCE,
        )
        .unwrap();
        assert!(u.amax() < 1e-12);
    }

    #[test]
    fn fully_actuated_control() {
        let (model, target, gains) = fully_actuated(2.0);
        let q = v(&[0.2, -0.7]);
        let p = v(&[1.0, 0.5]);
        let u = ida_pbc_control(&model, &target, &gains, &q, &p, FEASIBILITY_TOLERANCE).unwrap();
        let expected =
            model.potential_gradient(&q).unwrap() - target.desired_potential_gradient(&q).unwrap() - &p * 2.0;
        assert!((u - expected).amax() < 1e-12);
    }

    #[test]
    fn infeasible_control_is_an_error() {
        let (model, target, gains) = build_iwp(&IwpParams::default()).unwrap();
        let bad = target.with_j2(Arc::new(|_, _| Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])));
        let err = ida_pbc_control(
            &model,
            &bad,
            &gains,
            &v(&[0.1, 0.1]),
            &v(&[0.5, 0.5]),
            FEASIBILITY_TOLERANCE,
        );
        match err {
            Err(Error::InfeasibleMatching { residual }) => assert_eq!(residual.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn status_bands() {
        assert_eq!(
            MatchingStatus::classify(1e-9, FEASIBILITY_TOLERANCE),
            MatchingStatus::Holds
        );
        assert_eq!(
            MatchingStatus::classify(1e-5, FEASIBILITY_TOLERANCE),
            MatchingStatus::Warning
        );
        assert_eq!(
            MatchingStatus::classify(0.1, FEASIBILITY_TOLERANCE),
            MatchingStatus::Fails
        );
    }
}
