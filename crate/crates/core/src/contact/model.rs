use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector2};

use super::{ContactParams, RigidPose, Vec3, Wrench};
use crate::error::{Error, Result};
use crate::geometry::{interior_grid, unique_boundary_points, EdgeTable, PegHolePair};

/// How a sample point is currently pressing on the plate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContactMode {
    #[default]
    Free,
    /// Resting on the plate top; reacts along +z.
    Top,
    /// Pushed sideways into the hole wall; reacts along the wall normal.
    Wall,
}

/// Outcome of lowering the peg vertically onto the plate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drop {
    Contact(RigidPose),
    /// Nothing below the peg catches the plate within the allowed depth.
    Free,
}

/// Aggregate contact state at one pose. Force and torque act on the peg, in
/// world axes, with the torque taken about the peg origin.
#[derive(Debug, Clone)]
pub struct ContactEval {
    pub force: Vec3,
    pub torque: Vec3,
    /// Tangent stiffness with respect to a world twist `[dt, dtheta]` at the
    /// peg origin.
    pub stiffness: Matrix6<f64>,
    pub active: usize,
    pub max_penetration: f64,
}

#[derive(Debug, Clone)]
struct Level {
    height: f64,
    range: std::ops::Range<usize>,
}

/// Sampled peg surface and hole distance table for one peg/hole pair.
#[derive(Debug, Clone)]
pub struct ContactModel {
    pair: PegHolePair,
    params: ContactParams,
    hole: EdgeTable,
    hole_centre: Vector2<f64>,
    hole_radius: f64,
    peg_radius: f64,
    samples: Vec<Vec3>,
    levels: Vec<Level>,
}

fn skew(r: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

impl ContactModel {
    pub fn new(pair: &PegHolePair, params: &ContactParams) -> Result<Self> {
        params.validate()?;
        let rim = unique_boundary_points(&pair.peg, params.boundary_spacing)?;
        let face = interior_grid(&pair.peg, params.face_spacing)?;
        let mut samples = Vec::new();
        let mut levels = Vec::new();
        let start = samples.len();
        samples.extend(rim.iter().chain(&face).map(|p| Vec3::new(p.x, p.y, 0.0)));
        levels.push(Level {
            height: 0.0,
            range: start..samples.len(),
        });
        let top = params.ring_height.min(pair.extrusion_height);
        let rings = (top / params.ring_spacing).floor() as usize;
        for k in 1..=rings {
            let h = k as f64 * params.ring_spacing;
            let start = samples.len();
            samples.extend(rim.iter().map(|p| Vec3::new(p.x, p.y, h)));
            levels.push(Level {
                height: h,
                range: start..samples.len(),
            });
        }
        let verts = pair.hole.vertices();
        let hole_centre = verts.iter().sum::<Vector2<f64>>() / verts.len() as f64;
        let hole_radius = verts
            .iter()
            .map(|v| (v - hole_centre).norm())
            .fold(0.0, f64::max);
        Ok(Self {
            pair: pair.clone(),
            params: params.clone(),
            hole: EdgeTable::new(&pair.hole),
            hole_centre,
            hole_radius,
            peg_radius: pair.peg.max_radius(),
            samples,
            levels,
        })
    }

    pub fn pair(&self) -> &PegHolePair {
        &self.pair
    }

    pub fn params(&self) -> &ContactParams {
        &self.params
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn plate_top(&self) -> f64 {
        self.pair.plate_top_z
    }

    /// Signed distance to the hole outline in the plate plane (positive over
    /// plate material).
    pub fn hole_sdf(&self, x: f64, y: f64) -> f64 {
        self.hole.sdf(Vector2::new(x, y))
    }

    fn level_min_z(&self, r: &Matrix3<f64>, tz: f64, h: f64) -> f64 {
        tz + h * r[(2, 2)] - self.peg_radius * r[(2, 0)].hypot(r[(2, 1)])
    }

    /// Contact forces at `pose`. With `modes`, every sample keeps the mode it
    /// entered the plate with until it leaves; without, each penetrating
    /// sample takes the direction of least penetration. Friction opposes the
    /// displacement of each contact point from its place at `reference`.
    pub fn evaluate(
        &self,
        pose: &RigidPose,
        reference: Option<&RigidPose>,
        mut modes: Option<&mut [ContactMode]>,
        params: &ContactParams,
        with_stiffness: bool,
    ) -> Result<ContactEval> {
        if let Some(m) = modes.as_deref() {
            if m.len() != self.samples.len() {
                return Err(Error::DimensionMismatch {
                    context: "contact modes",
                    expected: self.samples.len(),
                    got: m.len(),
                });
            }
        }
        let r = pose.rotation();
        let t = pose.translation();
        let reference = reference.map(|p| (p.rotation(), p.translation()));
        let top = self.pair.plate_top_z;
        let limit = self.pair.extrusion_height;
        let kn = params.kn;
        let mut out = ContactEval {
            force: Vec3::zeros(),
            torque: Vec3::zeros(),
            stiffness: Matrix6::zeros(),
            active: 0,
            max_penetration: 0.0,
        };
        for level in &self.levels {
            if self.level_min_z(&r, t.z, level.height) >= top {
                if let Some(m) = modes.as_deref_mut() {
                    m[level.range.clone()].fill(ContactMode::Free);
                }
                continue;
            }
            for i in level.range.clone() {
                let s = &self.samples[i];
                let arm = r * s;
                let p = arm + t;
                let prior = modes.as_deref().map(|m| m[i]);
                if p.z >= top {
                    if let Some(m) = modes.as_deref_mut() {
                        m[i] = ContactMode::Free;
                    }
                    continue;
                }
                let depth = top - p.z;
                let q = Vector2::new(p.x, p.y);
                let bound = (q - self.hole_centre).norm() - self.hole_radius;
                let needs_exact = match prior {
                    Some(ContactMode::Wall) => true,
                    Some(ContactMode::Top) => bound <= 0.0,
                    _ => bound < depth,
                };
                let (sd, grad) = if needs_exact {
                    self.hole.sdf_grad(q)
                } else {
                    (bound, Vector2::zeros())
                };
                let mode = if sd <= 0.0 {
                    ContactMode::Free
                } else {
                    match prior {
                        Some(ContactMode::Top) => ContactMode::Top,
                        Some(ContactMode::Wall) => ContactMode::Wall,
                        _ if depth <= sd => ContactMode::Top,
                        _ => ContactMode::Wall,
                    }
                };
                if let Some(m) = modes.as_deref_mut() {
                    m[i] = mode;
                }
                let (pen, n) = match mode {
                    ContactMode::Free => continue,
                    ContactMode::Top => (depth, Vec3::z()),
                    ContactMode::Wall => (sd, Vec3::new(-grad.x, -grad.y, 0.0)),
                };
                if pen > limit {
                    return Err(Error::InvalidState(format!(
                        "sample penetrates {pen:.3} mm, deeper than the peg length {limit} mm"
                    )));
                }
                out.max_penetration = out.max_penetration.max(pen);
                out.active += 1;
                let normal = kn * pen;
                let mut f = n * normal;
                let mut ct = 0.0;
                if let Some((rr, tr)) = &reference {
                    if params.mu > 0.0 {
                        let d = p - (rr * s + tr);
                        let dt = d - n * d.dot(&n);
                        let scale = params.mu * normal / dt.norm().max(params.friction_smoothing);
                        f -= dt * scale;
                        ct = scale;
                    }
                }
                out.force += f;
                out.torque += arm.cross(&f);
                if with_stiffness {
                    let nn = n * n.transpose();
                    let m = nn * kn + (Matrix3::identity() - nn) * ct;
                    let mut j = Matrix3x6::zeros();
                    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
                    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&arm)));
                    out.stiffness += j.transpose() * m * j;
                }
            }
        }
        Ok(out)
    }

    /// Expresses an evaluation as the wrench on the peg at the sensor point,
    /// in peg axes.
    pub fn sensor_wrench(&self, pose: &RigidPose, eval: &ContactEval) -> Wrench {
        let r = pose.rotation();
        let lever = r * Vec3::new(0.0, 0.0, self.pair.sensor_height());
        let torque = eval.torque - lever.cross(&eval.force);
        Wrench::new(r.transpose() * eval.force, r.transpose() * torque)
    }

    /// Lowers the peg straight down at the commanded xy and orientation until
    /// its first sample reaches the plate top. Drops deeper than `free_depth`
    /// below the plate top count as free.
    pub fn drop_to_contact(&self, commanded: &RigidPose, free_depth: f64) -> Drop {
        let r = commanded.rotation();
        let t = commanded.translation();
        let top = self.pair.plate_top_z;
        let mut best = f64::NEG_INFINITY;
        for s in &self.samples {
            let w = r * s;
            let q = Vector2::new(t.x + w.x, t.y + w.y);
            let bound = (q - self.hole_centre).norm() - self.hole_radius;
            let over_plate = bound > 0.0 || self.hole.sdf(q) > 0.0;
            if over_plate {
                best = best.max(top - w.z);
            }
        }
        if best == f64::NEG_INFINITY || best < top - free_depth {
            Drop::Free
        } else {
            Drop::Contact(commanded.with_z(best))
        }
    }

    pub fn fresh_modes(&self) -> Vec<ContactMode> {
        vec![ContactMode::Free; self.samples.len()]
    }
}

/// Contact wrench on the peg at `pose`, taken at the sensor point in peg
/// axes, with friction measured against `commanded`.
pub fn contact_wrench(
    pair: &PegHolePair,
    pose: &RigidPose,
    commanded: &RigidPose,
    params: &ContactParams,
) -> Result<Wrench> {
    if !pose.is_finite() || !commanded.is_finite() {
        return Err(Error::NonFinite("pose".into()));
    }
    let model = ContactModel::new(pair, params)?;
    let eval = model.evaluate(pose, Some(commanded), None, params, false)?;
    Ok(model.sensor_wrench(pose, &eval))
}
