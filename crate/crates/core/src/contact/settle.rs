use nalgebra::{Matrix6, Vector6};
use rand::Rng;

use super::model::{ContactMode, ContactModel};
use super::{sensor_transform, ComplianceConfig, ContactParams, DomainConfig, RigidPose, Wrench};
use crate::error::{Error, Result};

/// How the controller treats the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZMode {
    /// Constant downward press force, no vertical spring.
    Force,
    /// Spring to the commanded height plus the press force.
    Position,
}

#[derive(Debug, Clone)]
pub struct SettleResult {
    pub pose: RigidPose,
    /// Sensor reading after the domain's sensor model.
    pub wrench: Wrench,
    /// Ideal contact wrench on the peg at the sensor point, in peg axes.
    pub contact: Wrench,
    pub iterations: usize,
    pub converged: bool,
    /// The peg fell more than the free depth below the plate in force mode.
    pub fell: bool,
}

impl SettleResult {
    pub fn in_contact(&self, threshold: f64) -> bool {
        self.contact.f().norm() > threshold
    }
}

/// Depth below the plate top at which a force-controlled peg counts as having
/// fallen into the hole.
pub(crate) const FALL_DEPTH_MM: f64 = 3.0;

/// Settles the peg from `start` under the admittance law around `commanded`,
/// then averages the wrench over the compliance window.
pub fn settle<R: Rng + ?Sized>(
    model: &ContactModel,
    commanded: &RigidPose,
    start: &RigidPose,
    zmode: ZMode,
    compliance: &ComplianceConfig,
    domain: &DomainConfig,
    rng: &mut R,
) -> Result<SettleResult> {
    let mut modes = model.fresh_modes();
    settle_with_modes(model, commanded, start, zmode, compliance, domain, &mut modes, rng)
}

/// As [`settle`], carrying per-sample contact modes across calls.
#[allow(clippy::too_many_arguments)]
pub fn settle_with_modes<R: Rng + ?Sized>(
    model: &ContactModel,
    commanded: &RigidPose,
    start: &RigidPose,
    zmode: ZMode,
    compliance: &ComplianceConfig,
    domain: &DomainConfig,
    modes: &mut [ContactMode],
    rng: &mut R,
) -> Result<SettleResult> {
    domain.validate()?;
    let params = domain.physics(model.params());
    let mut res = settle_core(model, commanded, start, zmode, compliance, &params, modes)?;
    res.wrench = sensor_transform(&-res.contact, domain, rng);
    Ok(res)
}

#[allow(clippy::too_many_arguments)]
fn step_matrices(
    model: &ContactModel,
    q: &Vector6<f64>,
    commanded: &RigidPose,
    zmode: ZMode,
    compliance: &ComplianceConfig,
    params: &ContactParams,
    modes: &mut [ContactMode],
    polish: bool,
) -> Result<(Vector6<f64>, Wrench)> {
    let pose = RigidPose::from_vector(q);
    let reference = match zmode {
        ZMode::Force => commanded.with_z(q[2]),
        ZMode::Position => *commanded,
    };
    let eval = model.evaluate(&pose, Some(&reference), Some(modes), params, true)?;
    let mut g = Matrix6::<f64>::identity();
    g.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(pose.euler_rate_matrix() * std::f64::consts::PI / 180.0));
    let mut gen = Vector6::zeros();
    gen.fixed_rows_mut::<3>(0).copy_from(&eval.force);
    gen.fixed_rows_mut::<3>(3).copy_from(&eval.torque);
    let qc = commanded.as_vector();
    let k = Vector6::from(compliance.stiffness);
    let mut residual = g.transpose() * gen;
    residual[2] -= compliance.press_force;
    for i in 0..6 {
        if i == 2 && zmode == ZMode::Force {
            continue;
        }
        residual[i] -= k[i] * (q[i] - qc[i]);
    }
    let contact = g.transpose() * eval.stiffness * g;
    let mut a = Matrix6::from_diagonal(&k) + contact;
    // In force mode the z spring only damps the iteration. Near equilibrium
    // the exact Jacobian is used once the contact holds the peg up.
    if polish && zmode == ZMode::Force && contact[(2, 2)] > k[2] {
        a[(2, 2)] -= k[2];
    }
    let delta = match a.cholesky() {
        Some(ch) => ch.solve(&residual),
        None => a
            .lu()
            .solve(&residual)
            .ok_or_else(|| Error::NonFinite("singular settle system".into()))?,
    };
    let mut step = if polish { delta } else { delta * compliance.relaxation };
    let lin = step.fixed_rows::<3>(0).norm();
    if lin > compliance.max_step_mm {
        step.fixed_rows_mut::<3>(0).scale_mut(compliance.max_step_mm / lin);
    }
    let ang = step.fixed_rows::<3>(3).norm();
    if ang > compliance.max_step_deg {
        step.fixed_rows_mut::<3>(3).scale_mut(compliance.max_step_deg / ang);
    }
    Ok((step, model.sensor_wrench(&pose, &eval)))
}

pub(crate) fn settle_core(
    model: &ContactModel,
    commanded: &RigidPose,
    start: &RigidPose,
    zmode: ZMode,
    compliance: &ComplianceConfig,
    params: &ContactParams,
    modes: &mut [ContactMode],
) -> Result<SettleResult> {
    compliance.validate()?;
    if !commanded.is_finite() || !start.is_finite() {
        return Err(Error::NonFinite("settle pose".into()));
    }
    let fall_z = model.plate_top() - FALL_DEPTH_MM;
    let mut q = start.as_vector();
    let mut converged = false;
    let mut fell = false;
    let mut iterations = 0;
    while iterations < compliance.max_iters {
        let (step, _) = step_matrices(model, &q, commanded, zmode, compliance, params, modes, false)?;
        q += step;
        iterations += 1;
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("settle diverged".into()));
        }
        if zmode == ZMode::Force && q[2] < fall_z {
            fell = true;
            break;
        }
        if step.norm() < compliance.tolerance {
            converged = true;
            break;
        }
    }
    let mut sum = Wrench::zero();
    if fell {
        let pose = RigidPose::from_vector(&q);
        let eval = model.evaluate(&pose, None, Some(modes), params, false)?;
        sum = model.sensor_wrench(&pose, &eval).scaled(compliance.window as f64);
    } else {
        let (step, _) = step_matrices(model, &q, commanded, zmode, compliance, params, modes, true)?;
        q += step;
        for _ in 0..compliance.window {
            let (step, w) = step_matrices(model, &q, commanded, zmode, compliance, params, modes, true)?;
            sum = sum + w;
            if compliance.window > 1 {
                q += step;
            }
        }
    }
    Ok(SettleResult {
        pose: RigidPose::from_vector(&q),
        wrench: Wrench::zero(),
        contact: sum.scaled(1.0 / compliance.window as f64),
        iterations,
        converged,
        fell,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PegHolePair, PolygonShape};
    use crate::seed::derive_rng;

    fn model() -> ContactModel {
        let pair = PegHolePair::new(PolygonShape::square(10.0).unwrap(), 1.0).unwrap();
        ContactModel::new(&pair, &ContactParams::default()).unwrap()
    }

    fn quiet_real() -> DomainConfig {
        DomainConfig {
            noise_force: 0.0,
            noise_torque: 0.0,
            ..DomainConfig::pseudo_real()
        }
    }

    #[test]
    fn free_settle_sags_by_press_over_stiffness() {
        let m = model();
        let c = ComplianceConfig::default();
        let cmd = RigidPose::new([2.0, 1.0, 5.0], [0.0; 3]);
        let domain = quiet_real();
        let res = settle(&m, &cmd, &cmd, ZMode::Position, &c, &domain, &mut derive_rng(&[1])).unwrap();
        assert!(res.converged);
        let expect_z = 5.0 - c.press_force / c.stiffness[2];
        assert!((res.pose.position[2] - expect_z).abs() < 1e-6, "{:?}", res.pose);
        assert!((res.pose.position[0] - 2.0).abs() < 1e-9 && (res.pose.position[1] - 1.0).abs() < 1e-9);
        assert_eq!(res.contact, Wrench::zero());
        let w = res.wrench.to_array();
        for i in 0..6 {
            assert!((w[i] - domain.bias[i]).abs() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn flat_contact_balances_press() {
        let m = model();
        let c = ComplianceConfig::default();
        let cmd = RigidPose::new([40.0, 0.0, 0.0], [0.0; 3]);
        let res = settle(&m, &cmd, &cmd, ZMode::Force, &c, &DomainConfig::sim(), &mut derive_rng(&[1])).unwrap();
        assert!(res.converged && !res.fell);
        assert!((res.wrench.force[2] + c.press_force).abs() < 1e-6, "{:?}", res.wrench);
    }

    #[test]
    fn settle_is_repeatable() {
        let m = model();
        let c = ComplianceConfig::default();
        let cmd = RigidPose::new([3.0, -1.5, 0.0], [2.0, -3.0, 7.0]);
        let start = match m.drop_to_contact(&cmd, 3.0) {
            crate::contact::Drop::Contact(p) => p,
            crate::contact::Drop::Free => panic!("expected contact"),
        };
        let run = || settle(&m, &cmd, &start, ZMode::Force, &c, &DomainConfig::pseudo_real(), &mut derive_rng(&[9])).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.pose, b.pose);
        assert_eq!(a.wrench, b.wrench);
        assert_eq!(a.iterations, b.iterations);
    }
}
