use serde::{Deserialize, Serialize};

use super::model::{ContactModel, Drop};
use super::settle::{settle_core, ZMode};
use super::{ComplianceConfig, DomainConfig, RigidPose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertionConfig {
    pub target_depth: f64,
    pub step: f64,
    /// Progress per step below which the step counts as stalled, mm.
    pub stall_progress: f64,
    pub stall_limit: usize,
    /// Success when the tip ends within this distance of the target depth.
    pub success_margin: f64,
    /// Lateral force above which a stalled peg is reported as jammed, N.
    pub jam_force: f64,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            target_depth: 10.0,
            step: 0.5,
            stall_progress: 0.1,
            stall_limit: 5,
            success_margin: 0.5,
            jam_force: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionOutcome {
    pub success: bool,
    /// Final tip depth below the plate top, mm.
    pub depth: f64,
    pub jammed: bool,
    pub steps: usize,
    pub unstable: bool,
}

/// Pushes the peg down from the commanded xy and orientation in position
/// mode, one step at a time, until it reaches the target depth or stalls.
pub fn attempt_insertion(
    model: &ContactModel,
    commanded: &RigidPose,
    config: &InsertionConfig,
    compliance: &ComplianceConfig,
    domain: &DomainConfig,
) -> Result<InsertionOutcome> {
    if !(config.step > 0.0 && config.target_depth > 0.0) {
        return Err(Error::invalid("insertion step and depth must be positive"));
    }
    if !commanded.is_finite() {
        return Err(Error::NonFinite("insertion pose".into()));
    }
    let top = model.plate_top();
    let mut pose = match model.drop_to_contact(commanded, f64::INFINITY) {
        Drop::Contact(p) => p,
        Drop::Free => commanded.with_z(top),
    };
    let params = domain.physics(model.params());
    let compliance = compliance.with_window(1);
    let mut modes = model.fresh_modes();
    let n = (config.target_depth / config.step).ceil() as usize;
    let mut depth = top - pose.position[2];
    let mut stalls = 0;
    let mut jammed = false;
    let mut unstable = false;
    let mut steps = 0;
    for j in 1..=n {
        let cmd = commanded.with_z(top - j as f64 * config.step);
        let res = settle_core(model, &cmd, &pose, ZMode::Position, &compliance, &params, &mut modes)?;
        steps = j;
        unstable |= !res.converged;
        pose = res.pose;
        let next = top - pose.position[2];
        if next - depth < config.stall_progress {
            stalls += 1;
        } else {
            stalls = 0;
        }
        depth = next;
        if stalls >= config.stall_limit {
            jammed = res.contact.lateral_force() > config.jam_force;
            break;
        }
    }
    Ok(InsertionOutcome {
        success: depth >= config.target_depth - config.success_margin,
        depth,
        jammed,
        steps,
        unstable,
    })
}
