//! Closed-loop insertion: contact, probe, estimate, correct, insert. Also the
//! spiral-search baseline and the paired success-rate suite.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptedEstimator;
use crate::contact::{
    attempt_insertion, multi_point_contact, ContactModel, ContactSignature, DomainConfig, InsertionConfig,
    InsertionOutcome, RigidPose,
};
use crate::dataset::{extrinsic_of, run_parallel, sample_offset, ExtrinsicPose, MisalignmentOffset, SimConfig};
use crate::error::{Error, Result};
use crate::estimator::{angle_error, EstimatorNet};
use crate::geometry::{sample_boundary_points, EdgeTable, PegHolePair, ShapeManifest, Vec2};
use crate::seed::derive_rng;

const SCENARIO_STREAM: u64 = 0x5ce;
const NOISE_STREAM: u64 = 0x2015e;

pub trait PoseEstimator: Sync {
    fn columns(&self) -> usize;
    fn estimate(&self, sig: &ContactSignature) -> Result<ExtrinsicPose>;
}

impl PoseEstimator for EstimatorNet {
    fn columns(&self) -> usize {
        EstimatorNet::columns(self)
    }

    fn estimate(&self, sig: &ContactSignature) -> Result<ExtrinsicPose> {
        EstimatorNet::estimate(self, sig)
    }
}

impl PoseEstimator for AdaptedEstimator {
    fn columns(&self) -> usize {
        AdaptedEstimator::columns(self)
    }

    fn estimate(&self, sig: &ContactSignature) -> Result<ExtrinsicPose> {
        AdaptedEstimator::estimate(self, sig)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpiralConfig {
    /// Radial growth per turn, mm.
    pub pitch: f64,
    /// Arc length between probes, mm.
    pub spacing: f64,
    pub max_probes: usize,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        Self {
            pitch: 1.0,
            spacing: 1.0,
            max_probes: 100,
        }
    }
}

/// Lateral probe offsets along an Archimedean spiral, starting at the centre
/// and spaced evenly by arc length.
pub fn spiral_points(config: &SpiralConfig) -> Vec<[f64; 2]> {
    let b = config.pitch / (2.0 * std::f64::consts::PI);
    // Arc length from the centre and its derivative.
    let len = |t: f64| 0.5 * b * (t * (1.0 + t * t).sqrt() + t.asinh());
    let dlen = |t: f64| b * (1.0 + t * t).sqrt();
    let mut out = Vec::with_capacity(config.max_probes);
    let mut theta: f64 = 0.0;
    for k in 0..config.max_probes {
        let target = k as f64 * config.spacing;
        for _ in 0..50 {
            let d = (len(theta) - target) / dlen(theta);
            theta -= d;
            if d.abs() < 1e-13 * (1.0 + theta) {
                break;
            }
        }
        let r = b * theta;
        out.push([r * theta.cos(), r * theta.sin()]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    pub max_trials: usize,
    pub insertion: InsertionConfig,
    pub spiral: SpiralConfig,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            max_trials: 5,
            insertion: InsertionConfig::default(),
            spiral: SpiralConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub trial: usize,
    /// Commanded `(x, y, ox, oy, oz)` the peg was brought down at.
    pub commanded: [f64; 5],
    /// Settled pose of the initial contact; absent when the peg dropped in.
    pub truth: Option<ExtrinsicPose>,
    pub estimate: Option<ExtrinsicPose>,
    pub ma_p: Option<f64>,
    pub ma_o: Option<f64>,
    /// Pose handed to the insertion attempt.
    pub inserted_at: [f64; 5],
    pub insertion: InsertionOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scenario: usize,
    pub shape_id: u32,
    pub vertices: usize,
    pub seen: bool,
    pub method: String,
    pub initial_offset: [f64; 5],
    pub trials: Vec<TrialEntry>,
    pub success: bool,
    pub trials_used: usize,
    /// Insertion attempts made by the spiral baseline.
    pub probes: usize,
    /// An unstable settle ended the scenario.
    pub aborted: bool,
}

fn pose_of(a: &[f64; 5]) -> RigidPose {
    RigidPose::new([a[0], a[1], 0.0], [a[2], a[3], a[4]])
}

/// Position and orientation maximum absolute errors.
pub fn max_errors(est: &ExtrinsicPose, truth: &ExtrinsicPose) -> (f64, f64) {
    let p = (est[0] - truth[0]).abs().max((est[1] - truth[1]).abs());
    let o = (2..5).map(|i| angle_error(est[i], truth[i]).abs()).fold(0.0, f64::max);
    (p, o)
}

/// Largest hole SDF over the peg outline placed at `pose`, tilt ignored.
/// Non-positive means the footprint fits inside the hole.
pub fn footprint_excess(pair: &PegHolePair, pose: &[f64; 5], spacing: f64) -> Result<f64> {
    let table = EdgeTable::new(&pair.hole);
    let (s, c) = pose[4].to_radians().sin_cos();
    let pts = sample_boundary_points(&pair.peg, spacing)?;
    Ok(pts
        .iter()
        .map(|b| {
            let q = Vec2::new(c * b.point.x - s * b.point.y + pose[0], s * b.point.x + c * b.point.y + pose[1]);
            table.sdf(q)
        })
        .fold(f64::NEG_INFINITY, f64::max))
}

pub struct Scenario<'a> {
    pub id: usize,
    pub shape_id: u32,
    pub vertices: usize,
    pub seen: bool,
    pub model: &'a ContactModel,
    pub offset: MisalignmentOffset,
    pub noise_seed: u64,
}

/// Estimation-driven assembly of one scenario with up to `max_trials`
/// contact/estimate/insert rounds.
pub fn run_trial(
    scenario: &Scenario,
    estimator: &dyn PoseEstimator,
    method: &str,
    sim: &SimConfig,
    domain: &DomainConfig,
    config: &AssemblyConfig,
) -> Result<TrialRecord> {
    if estimator.columns() != sim.probe.columns() {
        return Err(Error::DimensionMismatch {
            context: "estimator signature columns",
            expected: sim.probe.columns(),
            got: estimator.columns(),
        });
    }
    let mut rng = derive_rng(&[scenario.noise_seed]);
    let mut cmd = scenario.offset.to_array();
    let mut trials = Vec::new();
    let mut success = false;
    let mut aborted = false;
    for t in 1..=config.max_trials {
        let probe = multi_point_contact(scenario.model, &pose_of(&cmd), &sim.probe, &sim.compliance, domain, &mut rng)?;
        let (truth, estimate, target) = match &probe {
            None => (None, None, cmd),
            Some(p) => {
                if p.unstable {
                    aborted = true;
                    break;
                }
                let truth = extrinsic_of(&p.initial.pose);
                let est = estimator.estimate(&p.signature)?;
                let target = std::array::from_fn(|i| cmd[i] - est[i]);
                (Some(truth), Some(est), target)
            }
        };
        let (ma_p, ma_o) = match (&estimate, &truth) {
            (Some(e), Some(g)) => {
                let (p, o) = max_errors(e, g);
                (Some(p), Some(o))
            }
            _ => (None, None),
        };
        let insertion = attempt_insertion(scenario.model, &pose_of(&target), &config.insertion, &sim.compliance, domain)?;
        trials.push(TrialEntry {
            trial: t,
            commanded: cmd,
            truth,
            estimate,
            ma_p,
            ma_o,
            inserted_at: target,
            insertion,
        });
        if insertion.success {
            success = true;
            break;
        }
        cmd = target;
    }
    Ok(TrialRecord {
        scenario: scenario.id,
        shape_id: scenario.shape_id,
        vertices: scenario.vertices,
        seen: scenario.seen,
        method: method.to_string(),
        initial_offset: scenario.offset.to_array(),
        trials_used: trials.len(),
        trials,
        success,
        probes: 0,
        aborted,
    })
}

/// Presses down at successive spiral offsets around the initial pose,
/// keeping the orientation, until an insertion succeeds.
pub fn spiral_search(scenario: &Scenario, sim: &SimConfig, domain: &DomainConfig, config: &AssemblyConfig) -> Result<TrialRecord> {
    let base = scenario.offset.to_array();
    let mut last = None;
    let mut probes = 0;
    for p in spiral_points(&config.spiral) {
        let mut target = base;
        target[0] += p[0];
        target[1] += p[1];
        let out = attempt_insertion(scenario.model, &pose_of(&target), &config.insertion, &sim.compliance, domain)?;
        probes += 1;
        last = Some((target, out));
        if out.success {
            break;
        }
    }
    let (target, insertion) = last.ok_or_else(|| Error::invalid("spiral search needs at least one probe"))?;
    Ok(TrialRecord {
        scenario: scenario.id,
        shape_id: scenario.shape_id,
        vertices: scenario.vertices,
        seen: scenario.seen,
        method: "Spiral search".to_string(),
        initial_offset: base,
        trials: vec![TrialEntry {
            trial: 1,
            commanded: base,
            truth: None,
            estimate: None,
            ma_p: None,
            ma_o: None,
            inserted_at: target,
            insertion,
        }],
        success: insertion.success,
        trials_used: 1,
        probes,
        aborted: false,
    })
}

pub enum SuiteMethod<'a> {
    Estimator { name: String, estimator: &'a dyn PoseEstimator },
    Spiral,
}

impl SuiteMethod<'_> {
    pub fn name(&self) -> &str {
        match self {
            SuiteMethod::Estimator { name, .. } => name,
            SuiteMethod::Spiral => "Spiral search",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Scenarios per vertex class, spread evenly over the class's shapes.
    pub scenarios_per_class: usize,
    pub assembly: AssemblyConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scenarios_per_class: 40,
            assembly: AssemblyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub method: String,
    pub vertices: usize,
    pub seen: bool,
    pub scenarios: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean trials over successful scenarios.
    pub average_trials: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub method: String,
    pub seen: bool,
    pub scenarios: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub average_trials: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub groups: Vec<GroupRow>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Success rates per method and vertex class, plus seen/unseen totals.
pub fn summarize(records: &[TrialRecord]) -> SuiteReport {
    let mut by: BTreeMap<(String, usize), Vec<&TrialRecord>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
        by.entry((r.method.clone(), r.vertices)).or_default().push(r);
    }
    let row = |rs: &[&TrialRecord]| {
        let successes = rs.iter().filter(|r| r.success).count();
        let trials: Vec<f64> = rs.iter().filter(|r| r.success).map(|r| r.trials_used as f64).collect();
        (
            successes,
            100.0 * successes as f64 / rs.len().max(1) as f64,
            mean(&trials),
        )
    };
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for m in &order {
        for ((method, vertices), rs) in by.iter().filter(|((method, _), _)| method == m) {
            let (successes, success_rate, average_trials) = row(rs);
            rows.push(SuiteRow {
                method: method.clone(),
                vertices: *vertices,
                seen: rs[0].seen,
                scenarios: rs.len(),
                successes,
                success_rate,
                average_trials,
            });
        }
        for seen in [true, false] {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| &r.method == m && r.seen == seen).collect();
            if rs.is_empty() {
                continue;
            }
            let (successes, success_rate, average_trials) = row(&rs);
            groups.push(GroupRow {
                method: m.clone(),
                seen,
                scenarios: rs.len(),
                successes,
                success_rate,
                average_trials,
            });
        }
    }
    SuiteReport { rows, groups }
}

impl SuiteReport {
    pub fn group(&self, method: &str, seen: bool) -> Option<&GroupRow> {
        self.groups.iter().find(|g| g.method == method && g.seen == seen)
    }

    /// Per-class success rate and average trials.
    pub fn write_class_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "method,group,vertices,scenarios,successes,sr_percent,at")?;
        for r in &self.rows {
            let g = if r.seen { "seen" } else { "unseen" };
            let at = r.average_trials.map_or(String::new(), |a| format!("{a:.2}"));
            writeln!(
                w,
                "{},{g},{},{},{},{:.2},{at}",
                r.method, r.vertices, r.scenarios, r.successes, r.success_rate
            )?;
        }
        for r in &self.groups {
            let g = if r.seen { "seen" } else { "unseen" };
            let at = r.average_trials.map_or(String::new(), |a| format!("{a:.2}"));
            writeln!(w, "{},{g},avg,{},{},{:.2},{at}", r.method, r.scenarios, r.successes, r.success_rate)?;
        }
        Ok(())
    }

    /// One row per method with seen and unseen success rates.
    pub fn write_method_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "method,seen_sr_percent,seen_successes,seen_scenarios,unseen_sr_percent,unseen_successes,unseen_scenarios")?;
        let mut methods: Vec<&str> = Vec::new();
        for g in &self.groups {
            if !methods.contains(&g.method.as_str()) {
                methods.push(&g.method);
            }
        }
        for m in methods {
            let cell = |seen| match self.group(m, seen) {
                Some(g) => format!("{:.1},{},{}", g.success_rate, g.successes, g.scenarios),
                None => ",,".to_string(),
            };
            writeln!(w, "{m},{},{}", cell(true), cell(false))?;
        }
        Ok(())
    }
}

/// Per-trial estimation errors of every estimator-driven scenario.
pub fn write_trials_csv<W: Write>(records: &[TrialRecord], mut w: W) -> Result<()> {
    writeln!(w, "method,scenario,shape_id,trial,ma_p_mm,ma_o_deg,depth_mm,success")?;
    for r in records {
        for t in &r.trials {
            let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
            writeln!(
                w,
                "{},{},{},{},{},{},{:.4},{}",
                r.method,
                r.scenario,
                r.shape_id,
                t.trial,
                f(t.ma_p),
                f(t.ma_o),
                t.insertion.depth,
                t.insertion.success as u8
            )?;
        }
    }
    Ok(())
}

pub fn write_jsonl<W: Write>(records: &[TrialRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Median MA-P at each trial over scenarios that reached it.
pub fn median_ma_p_by_trial(records: &[TrialRecord], method: &str) -> Vec<Option<f64>> {
    let max = records.iter().map(|r| r.trials.len()).max().unwrap_or(0);
    (1..=max)
        .map(|t| {
            let mut v: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method)
                .filter_map(|r| r.trials.get(t - 1).and_then(|e| e.ma_p))
                .collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            let n = v.len();
            Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
        })
        .collect()
}

/// Runs every method on the same scenarios. Scenario offsets and sensor
/// noise streams depend only on `(seed, shape, index)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_suite(
    manifest: &ShapeManifest,
    methods: &[SuiteMethod],
    sim: &SimConfig,
    domain: &DomainConfig,
    config: &SuiteConfig,
    seed: u64,
    workers: usize,
) -> Result<(Vec<TrialRecord>, SuiteReport)> {
    let models: BTreeMap<u32, ContactModel> = manifest
        .pairs()?
        .into_iter()
        .map(|(id, p)| Ok((id, ContactModel::new(&p, &sim.contact)?)))
        .collect::<Result<_>>()?;
    let mut scenarios = Vec::new();
    for class in &manifest.classes {
        if class.shape_ids.is_empty() {
            continue;
        }
        let per_shape = config.scenarios_per_class.div_ceil(class.shape_ids.len());
        for &id in &class.shape_ids {
            for idx in 0..per_shape {
                let mut rng = derive_rng(&[seed, SCENARIO_STREAM, id as u64, idx as u64]);
                scenarios.push(Scenario {
                    id: scenarios.len(),
                    shape_id: id,
                    vertices: class.vertices,
                    seen: class.seen,
                    model: &models[&id],
                    offset: sample_offset(&mut rng, &sim.bounds),
                    noise_seed: crate::seed::mix(&[seed, NOISE_STREAM, id as u64, idx as u64]),
                });
            }
        }
    }
    let mut records = Vec::new();
    for m in methods {
        let out = run_parallel(workers, &scenarios, |s| match m {
            SuiteMethod::Estimator { name, estimator } => run_trial(s, *estimator, name, sim, domain, &config.assembly),
            SuiteMethod::Spiral => spiral_search(s, sim, domain, &config.assembly),
        })?;
        records.extend(out);
    }
    let report = summarize(&records);
    Ok((records, report))
}
