//! Quasi-static contact between an extruded polygon peg and a plate with a
//! matching hole.
//!
//! The peg frame has its origin at the centre of the bottom face with z along
//! the peg axis; poses place that frame in the hole frame (origin at the hole
//! centre on the plate top). The F/T sensor sits on the peg axis at half the
//! peg length. Forces are in N, torques in N·mm, rotations are intrinsic
//! X-Y-Z Euler angles in degrees.

mod insertion;
mod model;
mod probe;
mod sensor;
mod settle;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use insertion::{attempt_insertion, InsertionConfig, InsertionOutcome};
pub use model::{contact_wrench, ContactEval, ContactMode, ContactModel, Drop};
pub use probe::{multi_point_contact, ContactSignature, ProbeConfig, ProbeOutcome, FORCE_ROWS, TORQUE_ROWS};
pub use sensor::sensor_transform;
pub use settle::{settle, settle_with_modes, SettleResult, ZMode};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub position: [f64; 3],
    pub euler_deg: [f64; 3],
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

impl RigidPose {
    pub fn new(position: [f64; 3], euler_deg: [f64; 3]) -> Self {
        Self {
            position,
            euler_deg,
        }
    }

    pub fn identity() -> Self {
        Self::new([0.0; 3], [0.0; 3])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let [a, b, c] = self.euler_deg;
        rot_x(a) * rot_y(b) * rot_z(c)
    }

    /// Columns map Euler-angle rates (per radian) to the world angular velocity.
    pub fn euler_rate_matrix(&self) -> Matrix3<f64> {
        let [a, b, _] = self.euler_deg;
        let rx = rot_x(a);
        let ry_axis = rx * Vec3::y();
        let rz_axis = rx * rot_y(b) * Vec3::z();
        Matrix3::from_columns(&[Vec3::x(), ry_axis, rz_axis])
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(&self.euler_deg).all(|v| v.is_finite())
    }

    pub fn wrapped(&self) -> Self {
        Self::new(self.position, self.euler_deg.map(wrap_deg))
    }

    pub fn with_z(&self, z: f64) -> Self {
        let mut p = *self;
        p.position[2] = z;
        p
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        let [x, y, z] = self.position;
        Self::new([x + dx, y + dy, z + dz], self.euler_deg)
    }

    /// Mirror image across the world XZ plane.
    pub fn mirrored_y(&self) -> Self {
        let [x, y, z] = self.position;
        let [a, b, c] = self.euler_deg;
        Self::new([x, -y, z], [-a, b, -c])
    }

    pub(crate) fn as_vector(&self) -> nalgebra::Vector6<f64> {
        let [x, y, z] = self.position;
        let [a, b, c] = self.euler_deg;
        nalgebra::Vector6::new(x, y, z, a, b, c)
    }

    pub(crate) fn from_vector(q: &nalgebra::Vector6<f64>) -> Self {
        Self::new([q[0], q[1], q[2]], [q[3], q[4], q[5]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: [f64; 3],
    pub torque: [f64; 3],
}

impl Wrench {
    pub fn new(force: Vec3, torque: Vec3) -> Self {
        Self {
            force: force.into(),
            torque: torque.into(),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            force: [a[0], a[1], a[2]],
            torque: [a[3], a[4], a[5]],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [fx, fy, fz] = self.force;
        let [tx, ty, tz] = self.torque;
        [fx, fy, fz, tx, ty, tz]
    }

    pub fn f(&self) -> Vec3 {
        Vec3::from(self.force)
    }

    pub fn t(&self) -> Vec3 {
        Vec3::from(self.torque)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * s))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn lateral_force(&self) -> f64 {
        self.force[0].hypot(self.force[1])
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, o: Wrench) -> Wrench {
        let a = self.to_array();
        let b = o.to_array();
        Wrench::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }
}

impl std::ops::Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        self.scaled(-1.0)
    }
}

/// Admittance controller around the commanded pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComplianceConfig {
    /// N/mm for x, y, z; N·mm/deg for the three rotations.
    pub stiffness: [f64; 6],
    /// Constant press force along world -z, N.
    pub press_force: f64,
    pub relaxation: f64,
    pub max_iters: usize,
    /// Convergence threshold on the pose update norm (mm/deg mixed).
    pub tolerance: f64,
    /// Number of iterations the reported wrench is averaged over.
    pub window: usize,
    pub max_step_mm: f64,
    pub max_step_deg: f64,
}

impl Default for ComplianceConfig {
    fn default() -> Self {
        Self {
            stiffness: [50.0, 50.0, 50.0, 500.0, 500.0, 500.0],
            press_force: 10.0,
            relaxation: 0.3,
            max_iters: 500,
            tolerance: 1e-4,
            window: 50,
            max_step_mm: 0.5,
            max_step_deg: 0.5,
        }
    }
}

impl ComplianceConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.stiffness.iter().any(|k| !(*k > 0.0)) {
            return Err(crate::Error::invalid("all stiffnesses must be positive"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(crate::Error::invalid("relaxation gain must lie in (0, 1]"));
        }
        if self.window == 0 || self.window > self.max_iters {
            return Err(crate::Error::invalid("averaging window must be in 1..=max_iters"));
        }
        Ok(())
    }

    pub fn with_window(&self, window: usize) -> Self {
        Self {
            window,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactParams {
    /// Penalty stiffness per sample point, N/mm.
    pub kn: f64,
    pub mu: f64,
    pub boundary_spacing: f64,
    pub face_spacing: f64,
    /// Vertical spacing of side-wall sample rings.
    pub ring_spacing: f64,
    /// Side walls are sampled up to this height above the bottom face.
    pub ring_height: f64,
    /// Displacement below which friction ramps linearly to zero, mm.
    pub friction_smoothing: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            kn: 10.0,
            mu: 0.3,
            boundary_spacing: 0.5,
            face_spacing: 2.0,
            ring_spacing: 1.0,
            ring_height: 12.0,
            friction_smoothing: 0.01,
        }
    }
}

impl ContactParams {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.kn > 0.0) || !(self.mu >= 0.0) {
            return Err(crate::Error::invalid("contact requires kn > 0 and mu >= 0"));
        }
        if !(self.boundary_spacing > 0.0 && self.face_spacing > 0.0 && self.ring_spacing > 0.0) {
            return Err(crate::Error::invalid("sample spacings must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Domain {
    Sim,
    PseudoReal,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::Sim => 0,
            Domain::PseudoReal => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Domain::Sim),
            1 => Some(Domain::PseudoReal),
            _ => None,
        }
    }
}

/// Physics perturbation plus sensor model of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain: Domain,
    pub kn_scale: f64,
    pub mu_offset: f64,
    pub gains: [f64; 6],
    pub yaw_bias_deg: f64,
    /// tanh torque saturation level, N·mm; `None` disables it.
    pub torque_saturation: Option<f64>,
    pub noise_force: f64,
    pub noise_torque: f64,
    pub bias: [f64; 6],
    pub noise_seed: u64,
}

impl DomainConfig {
    pub fn sim() -> Self {
        Self {
            domain: Domain::Sim,
            kn_scale: 1.0,
            mu_offset: 0.0,
            gains: [1.0; 6],
            yaw_bias_deg: 0.0,
            torque_saturation: None,
            noise_force: 0.0,
            noise_torque: 0.0,
            bias: [0.0; 6],
            noise_seed: 0,
        }
    }

    /// Default stand-in for the physical setup. Gains are drawn once from a
    /// fixed stream so the perturbation is a constant of the domain.
    pub fn pseudo_real() -> Self {
        use rand::Rng;
        let mut rng = crate::seed::derive_rng(&[0x9a1_25ea1]);
        let gains = std::array::from_fn(|_| rng.random_range(0.8..=1.2));
        Self {
            domain: Domain::PseudoReal,
            kn_scale: 1.5,
            mu_offset: 0.2,
            gains,
            yaw_bias_deg: 25.0,
            torque_saturation: Some(200.0),
            noise_force: 0.05,
            noise_torque: 5.0,
            bias: [0.2, -0.1, 0.0, 10.0, -5.0, 8.0],
            noise_seed: 0x5e45,
        }
    }

    /// Pseudo-real tag with simulator physics and an identity sensor.
    pub fn identity_real() -> Self {
        Self {
            domain: Domain::PseudoReal,
            ..Self::sim()
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Sim => Self::sim(),
            Domain::PseudoReal => Self::pseudo_real(),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.kn_scale > 0.0) {
            return Err(crate::Error::invalid("kn multiplier must be positive"));
        }
        if let Some(t) = self.torque_saturation {
            if !(t > 0.0) {
                return Err(crate::Error::invalid("torque saturation must be positive"));
            }
        }
        if self.noise_force < 0.0 || self.noise_torque < 0.0 {
            return Err(crate::Error::invalid("noise levels must be non-negative"));
        }
        Ok(())
    }

    pub(crate) fn physics(&self, base: &ContactParams) -> ContactParams {
        ContactParams {
            kn: base.kn * self.kn_scale,
            mu: (base.mu + self.mu_offset).max(0.0),
            ..base.clone()
        }
    }
}
