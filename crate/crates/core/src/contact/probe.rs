use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{ContactModel, Drop};
use super::settle::{settle, SettleResult, ZMode, FALL_DEPTH_MM};
use super::{sensor_transform, ComplianceConfig, DomainConfig, RigidPose, Wrench};
use crate::error::{Error, Result};

/// Wrench components kept in a signature, as indices into `[Fx..Tz]`.
pub const FORCE_ROWS: [usize; 2] = [0, 1];
pub const TORQUE_ROWS: [usize; 3] = [3, 4, 5];
pub const MAX_PROBES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Number of perturbed probes after the initial contact.
    pub probes: usize,
    pub delta_deg: f64,
    /// Contact force below which a probe counts as having lost contact, N.
    pub contact_threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probes: 4,
            delta_deg: 10.0,
            contact_threshold: 0.5,
        }
    }
}

impl ProbeConfig {
    pub fn columns(&self) -> usize {
        self.probes + 1
    }

    /// Euler-angle perturbation of probe `j` (0-based): +X, -X, +Y, -Y.
    pub fn perturbation(&self, j: usize) -> [f64; 3] {
        let sign = if j.is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut d = [0.0; 3];
        d[j / 2] = sign * self.delta_deg;
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.probes > MAX_PROBES {
            return Err(Error::invalid(format!(
                "at most {MAX_PROBES} probes are supported, got {}",
                self.probes
            )));
        }
        if !(self.delta_deg > 0.0) {
            return Err(Error::invalid("probe angle must be positive"));
        }
        Ok(())
    }
}

/// Lateral force and torque rows of the probe wrenches, one column per probe
/// (column 0 is the initial contact).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactSignature {
    columns: usize,
    /// Row-major `[Fx, Fy, Tx, Ty, Tz] x columns`.
    values: Vec<f64>,
}

impl ContactSignature {
    pub const ROWS: usize = 5;

    pub fn from_wrenches(wrenches: &[Wrench]) -> Self {
        let columns = wrenches.len();
        let mut values = vec![0.0; Self::ROWS * columns];
        for (c, w) in wrenches.iter().enumerate() {
            let a = w.to_array();
            for (r, &i) in FORCE_ROWS.iter().chain(&TORQUE_ROWS).enumerate() {
                values[r * columns + c] = a[i];
            }
        }
        Self { columns, values }
    }

    pub fn from_values(columns: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != Self::ROWS * columns {
            return Err(Error::DimensionMismatch {
                context: "signature values",
                expected: Self::ROWS * columns,
                got: values.len(),
            });
        }
        Ok(Self { columns, values })
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.columns + col]
    }

    /// `Fx` then `Fy` rows, `2 * columns` values.
    pub fn force_features(&self) -> &[f64] {
        &self.values[..2 * self.columns]
    }

    /// `Tx`, `Ty`, `Tz` rows, `3 * columns` values.
    pub fn torque_features(&self) -> &[f64] {
        &self.values[2 * self.columns..]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub signature: ContactSignature,
    pub initial: SettleResult,
    /// `None` where the perturbed peg found nothing to rest on.
    pub probes: Vec<Option<SettleResult>>,
    pub lost_contact: bool,
    pub unstable: bool,
}

/// Settles the peg at the commanded offset and then at each perturbed
/// orientation, collecting the sensed wrenches. Returns `None` when the peg
/// drops into the hole without touching the plate.
pub fn multi_point_contact<R: Rng + ?Sized>(
    model: &ContactModel,
    commanded: &RigidPose,
    probe: &ProbeConfig,
    compliance: &ComplianceConfig,
    domain: &DomainConfig,
    rng: &mut R,
) -> Result<Option<ProbeOutcome>> {
    probe.validate()?;
    let start = match model.drop_to_contact(commanded, FALL_DEPTH_MM) {
        Drop::Contact(p) => p,
        Drop::Free => return Ok(None),
    };
    let initial = settle(model, commanded, &start, ZMode::Force, compliance, domain, rng)?;
    let mut lost = initial.fell || !initial.in_contact(probe.contact_threshold);
    let mut unstable = !initial.converged;
    let mut wrenches = vec![initial.wrench];
    let mut probes = Vec::with_capacity(probe.probes);
    for j in 0..probe.probes {
        let d = probe.perturbation(j);
        let mut cmd = *commanded;
        for k in 0..3 {
            cmd.euler_deg[k] += d[k];
        }
        match model.drop_to_contact(&cmd, FALL_DEPTH_MM) {
            Drop::Contact(s) => {
                let res = settle(model, &cmd, &s, ZMode::Force, compliance, domain, rng)?;
                lost |= res.fell || !res.in_contact(probe.contact_threshold);
                unstable |= !res.converged;
                wrenches.push(res.wrench);
                probes.push(Some(res));
            }
            Drop::Free => {
                lost = true;
                wrenches.push(sensor_transform(&Wrench::zero(), domain, rng));
                probes.push(None);
            }
        }
    }
    let signature = ContactSignature::from_wrenches(&wrenches);
    if !signature.is_finite() {
        return Err(Error::NonFinite("contact signature".into()));
    }
    Ok(Some(ProbeOutcome {
        signature,
        initial,
        probes,
        lost_contact: lost,
        unstable,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::ContactParams;
    use crate::geometry::{PegHolePair, PolygonShape};
    use crate::seed::derive_rng;

    fn square_model() -> ContactModel {
        let pair = PegHolePair::new(PolygonShape::square(10.0).unwrap(), 1.0).unwrap();
        ContactModel::new(&pair, &ContactParams::default()).unwrap()
    }

    fn probe_at(x: f64, y: f64) -> ProbeOutcome {
        let cmd = RigidPose::new([x, y, 0.0], [0.0; 3]);
        multi_point_contact(
            &square_model(),
            &cmd,
            &ProbeConfig::default(),
            &ComplianceConfig::default(),
            &DomainConfig::sim(),
            &mut derive_rng(&[1]),
        )
        .unwrap()
        .expect("contact")
    }

    #[test]
    fn four_probes_give_five_columns() {
        let out = probe_at(3.0, 0.0);
        assert_eq!(out.signature.columns(), 5);
        assert_eq!(out.signature.values().len(), 25);
        assert_eq!(out.probes.len(), 4);
        assert!(!out.lost_contact && !out.unstable);
    }

    fn assert_mirrored(s: &ContactSignature, a: usize, b: usize, sign: [f64; 5]) {
        let scale = s.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for r in 0..ContactSignature::ROWS {
            let (x, y) = (s.get(r, a), s.get(r, b));
            assert!((x - sign[r] * y).abs() < 1e-6 * scale, "row {r}: {x} vs {y}");
        }
    }

    #[test]
    fn opposite_probes_mirror_on_symmetric_pose() {
        // Offset along x: the scene is symmetric under y -> -y, which swaps
        // the +X and -X probes and flips Fy, Tx and Tz.
        let s = probe_at(3.0, 0.0).signature;
        assert_mirrored(&s, 1, 2, [1.0, -1.0, -1.0, 1.0, -1.0]);
        // Offset along y: x -> -x swaps the Y probes and flips Fx, Ty, Tz.
        let s = probe_at(0.0, 3.0).signature;
        assert_mirrored(&s, 3, 4, [-1.0, 1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn perturbation_order() {
        let p = ProbeConfig::default();
        assert_eq!(p.perturbation(0), [10.0, 0.0, 0.0]);
        assert_eq!(p.perturbation(1), [-10.0, 0.0, 0.0]);
        assert_eq!(p.perturbation(2), [0.0, 10.0, 0.0]);
        assert_eq!(p.perturbation(3), [0.0, -10.0, 0.0]);
        assert!(ProbeConfig { probes: 5, ..p }.validate().is_err());
    }

    #[test]
    fn centred_peg_falls_through() {
        let cmd = RigidPose::new([0.0, 0.0, 0.0], [0.0; 3]);
        let out = multi_point_contact(
            &square_model(),
            &cmd,
            &ProbeConfig::default(),
            &ComplianceConfig::default(),
            &DomainConfig::sim(),
            &mut derive_rng(&[1]),
        )
        .unwrap();
        assert!(out.is_none());
    }
}
