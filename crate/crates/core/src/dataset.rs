//! Misalignment datasets: offset sampling, probe records, splits, paired
//! sim/pseudo-real records and the binary container they are stored in.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contact::{
    multi_point_contact, ComplianceConfig, ContactModel, ContactParams, ContactSignature, Domain, DomainConfig,
    ProbeConfig, RigidPose,
};
use crate::error::{Error, Result};
use crate::geometry::ShapeManifest;
use crate::seed::derive_rng;

pub const MAGIC: &[u8; 4] = b"PFIT";
pub const FORMAT_VERSION: u32 = 1;

pub const FLAG_FREE_INSERT: u8 = 1;
pub const FLAG_UNSTABLE: u8 = 1 << 1;
pub const FLAG_LOST_CONTACT: u8 = 1 << 2;
const SPLIT_SHIFT: u8 = 4;

const DATASET_STREAM: u64 = 0xda7a;
const PAIRED_STREAM: u64 = 0x9a12;
const EVAL_STREAM: u64 = 0xe7a1;

/// Symmetric bounds on the sampled misalignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OffsetBounds {
    pub lateral_mm: f64,
    pub angle_deg: f64,
}

impl Default for OffsetBounds {
    fn default() -> Self {
        Self {
            lateral_mm: 10.0,
            angle_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentOffset {
    pub dp: [f64; 2],
    pub dor: [f64; 3],
}

impl MisalignmentOffset {
    pub fn zero() -> Self {
        Self {
            dp: [0.0; 2],
            dor: [0.0; 3],
        }
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            dp: [a[0], a[1]],
            dor: [a[2], a[3], a[4]],
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.dp[0], self.dp[1], self.dor[0], self.dor[1], self.dor[2]]
    }

    /// Commanded peg pose above the hole; z is left at the plate top.
    pub fn to_pose(&self) -> RigidPose {
        RigidPose::new([self.dp[0], self.dp[1], 0.0], self.dor)
    }

    pub fn within(&self, b: &OffsetBounds) -> bool {
        self.dp.iter().all(|v| v.abs() <= b.lateral_mm) && self.dor.iter().all(|v| v.abs() <= b.angle_deg)
    }
}

pub fn sample_offset<R: Rng + ?Sized>(rng: &mut R, bounds: &OffsetBounds) -> MisalignmentOffset {
    let l = bounds.lateral_mm;
    let a = bounds.angle_deg;
    MisalignmentOffset {
        dp: [rng.random_range(-l..=l), rng.random_range(-l..=l)],
        dor: [
            rng.random_range(-a..=a),
            rng.random_range(-a..=a),
            rng.random_range(-a..=a),
        ],
    }
}

/// `(px, py, ox, oy, oz)` of the peg in the hole frame, mm and degrees.
pub type ExtrinsicPose = [f64; 5];

pub fn extrinsic_of(pose: &RigidPose) -> ExtrinsicPose {
    let p = pose.wrapped();
    [p.position[0], p.position[1], p.euler_deg[0], p.euler_deg[1], p.euler_deg[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisalignmentRecord {
    pub shape_id: u32,
    pub domain: Domain,
    pub flags: u8,
    pub offset: MisalignmentOffset,
    /// Settled pose of the initial contact.
    pub pose: ExtrinsicPose,
    pub signature: ContactSignature,
}

impl MisalignmentRecord {
    pub fn split(&self) -> Split {
        Split::from_tag((self.flags >> SPLIT_SHIFT) & 0b11).unwrap_or(Split::Test)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.flags = (self.flags & 0x0f) | (split.tag() << SPLIT_SHIFT);
        self
    }

    pub fn is_free(&self) -> bool {
        self.flags & FLAG_FREE_INSERT != 0
    }

    pub fn is_unstable(&self) -> bool {
        self.flags & FLAG_UNSTABLE != 0
    }

    pub fn lost_contact(&self) -> bool {
        self.flags & FLAG_LOST_CONTACT != 0
    }

    /// Usable for training and evaluation.
    pub fn usable(&self) -> bool {
        !self.is_free() && !self.is_unstable()
    }
}

/// Physics and probing settings shared by every record of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub contact: ContactParams,
    pub compliance: ComplianceConfig,
    pub probe: ProbeConfig,
    pub bounds: OffsetBounds,
}

/// Probes one commanded offset and records the signature together with the
/// settled pose of the initial contact.
pub fn generate_record<R: Rng + ?Sized>(
    model: &ContactModel,
    shape_id: u32,
    offset: &MisalignmentOffset,
    sim: &SimConfig,
    domain: &DomainConfig,
    rng: &mut R,
) -> Result<MisalignmentRecord> {
    if !offset.within(&sim.bounds) {
        return Err(Error::invalid(format!("offset {:?} outside the sampling bounds", offset.to_array())));
    }
    let k = sim.probe.columns();
    let out = multi_point_contact(model, &offset.to_pose(), &sim.probe, &sim.compliance, domain, rng)?;
    Ok(match out {
        None => MisalignmentRecord {
            shape_id,
            domain: domain.domain,
            flags: FLAG_FREE_INSERT,
            offset: *offset,
            pose: offset.to_array(),
            signature: ContactSignature::from_values(k, vec![0.0; ContactSignature::ROWS * k])?,
        },
        Some(p) => {
            let mut flags = 0;
            if p.unstable {
                flags |= FLAG_UNSTABLE;
            }
            if p.lost_contact {
                flags |= FLAG_LOST_CONTACT;
            }
            MisalignmentRecord {
                shape_id,
                domain: domain.domain,
                flags,
                offset: *offset,
                pose: extrinsic_of(&p.initial.pose),
                signature: p.signature,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_per_shape: usize,
    pub val_per_shape: usize,
    pub test_per_shape: usize,
    /// Test-only records for each unseen shape.
    pub unseen_per_shape: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_per_shape: 600,
            val_per_shape: 100,
            test_per_shape: 100,
            unseen_per_shape: 100,
        }
    }
}

impl DatasetConfig {
    pub fn paper_scale() -> Self {
        Self {
            train_per_shape: 1200,
            val_per_shape: 1000,
            test_per_shape: 1000,
            unseen_per_shape: 3200,
        }
    }

    pub fn seen_per_shape(&self) -> usize {
        self.train_per_shape + self.val_per_shape + self.test_per_shape
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train_per_shape {
            Split::Train
        } else if index < self.train_per_shape + self.val_per_shape {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Per-entry standardization statistics over the usable training records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Population statistics of the given rows; constant channels get std 1.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, n: usize) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::InsufficientData("no rows for channel statistics".into()));
        }
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for r in &rows {
            if r.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "channel statistics",
                    expected: n,
                    got: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for r in &rows {
            for i in 0..n {
                let d = r[i] - mean[i];
                var[i] += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub probes: usize,
    pub columns: usize,
    pub stats: ChannelStats,
    pub records: Vec<MisalignmentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCounts {
    pub shape_id: u32,
    pub vertices: usize,
    pub seen: bool,
    pub records: usize,
    pub free_insert: usize,
    pub unstable: usize,
    pub lost_contact: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub seed: u64,
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub free_insert: usize,
    pub unstable: usize,
    pub lost_contact: usize,
    pub free_insert_rate: f64,
    pub shapes: Vec<ShapeCounts>,
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

pub(crate) fn run_parallel<T: Send, J: Sync>(
    workers: usize,
    jobs: &[J],
    f: impl Fn(&J) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    with_pool(workers, || jobs.par_iter().map(&f).collect::<Result<Vec<T>>>())?
}

fn models_for(manifest: &ShapeManifest, params: &ContactParams) -> Result<std::collections::BTreeMap<u32, ContactModel>> {
    manifest
        .pairs()?
        .into_iter()
        .map(|(id, pair)| Ok((id, ContactModel::new(&pair, params)?)))
        .collect()
}

/// Generates the misalignment dataset for every shape in the manifest. Each
/// record draws from its own stream keyed by `(seed, shape, index)`, so the
/// output does not depend on `workers`.
pub fn generate_dataset(
    manifest: &ShapeManifest,
    config: &DatasetConfig,
    sim: &SimConfig,
    domain: &DomainConfig,
    seed: u64,
    workers: usize,
) -> Result<Dataset> {
    if manifest.shapes.is_empty() {
        return Err(Error::invalid("shape manifest is empty"));
    }
    let models = models_for(manifest, &sim.contact)?;
    let mut jobs = Vec::new();
    for s in &manifest.shapes {
        let (count, seen) = if manifest.is_seen(s.id) {
            (config.seen_per_shape(), true)
        } else {
            (config.unseen_per_shape, false)
        };
        for idx in 0..count {
            let split = if seen { config.split_of(idx) } else { Split::Test };
            jobs.push((s.id, idx, split));
        }
    }
    let records = run_parallel(workers, &jobs, |&(id, idx, split)| {
        let mut rng = derive_rng(&[seed, DATASET_STREAM, id as u64, idx as u64]);
        let offset = sample_offset(&mut rng, &sim.bounds);
        let rec = generate_record(&models[&id], id, &offset, sim, domain, &mut rng)?;
        Ok(rec.with_split(split))
    })?;
    let columns = sim.probe.columns();
    let stats = training_stats(&records, columns)?;
    Ok(Dataset {
        probes: sim.probe.probes,
        columns,
        stats,
        records,
    })
}

fn training_stats(records: &[MisalignmentRecord], columns: usize) -> Result<ChannelStats> {
    let rows = records
        .iter()
        .filter(|r| r.usable() && r.split() == Split::Train)
        .map(|r| r.signature.values());
    match ChannelStats::from_rows(rows, ContactSignature::ROWS * columns) {
        Err(Error::InsufficientData(_)) => Ok(ChannelStats::identity(ContactSignature::ROWS * columns)),
        other => other,
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &MisalignmentRecord> {
        self.records.iter().filter(move |r| r.split() == split)
    }

    pub fn usable(&self, split: Split) -> Vec<&MisalignmentRecord> {
        self.split(split).filter(|r| r.usable()).collect()
    }

    pub fn report(&self, manifest: &ShapeManifest, seed: u64) -> GenerationReport {
        let mut shapes = Vec::new();
        for s in &manifest.shapes {
            let recs: Vec<_> = self.records.iter().filter(|r| r.shape_id == s.id).collect();
            shapes.push(ShapeCounts {
                shape_id: s.id,
                vertices: s.n,
                seen: manifest.is_seen(s.id),
                records: recs.len(),
                free_insert: recs.iter().filter(|r| r.is_free()).count(),
                unstable: recs.iter().filter(|r| r.is_unstable()).count(),
                lost_contact: recs.iter().filter(|r| r.lost_contact()).count(),
            });
        }
        let total = self.records.len();
        let free_insert = shapes.iter().map(|s| s.free_insert).sum();
        GenerationReport {
            seed,
            total,
            train: self.split(Split::Train).count(),
            val: self.split(Split::Val).count(),
            test: self.split(Split::Test).count(),
            free_insert,
            unstable: shapes.iter().map(|s| s.unstable).sum(),
            lost_contact: shapes.iter().map(|s| s.lost_contact).sum(),
            free_insert_rate: if total == 0 { 0.0 } else { free_insert as f64 / total as f64 },
            shapes,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self.probes, self.columns, &self.stats, &self.records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (probes, columns, stats, records) = decode(bytes)?;
        Ok(Self {
            probes,
            columns,
            stats,
            records,
        })
    }

    /// Hex sha256 of the binary encoding.
    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_csv_header(&mut w, self.columns)?;
        for (i, r) in self.records.iter().enumerate() {
            write_csv_row(&mut w, i, r)?;
        }
        Ok(())
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const ROW_NAMES: [&str; 5] = ["fx", "fy", "tx", "ty", "tz"];

fn write_csv_header<W: Write>(w: &mut W, columns: usize) -> Result<()> {
    write!(
        w,
        "record,shape_id,domain,split,free_insert,unstable,lost_contact,\
         off_x,off_y,off_ox,off_oy,off_oz,px,py,ox,oy,oz"
    )?;
    for name in ROW_NAMES {
        for c in 0..columns {
            write!(w, ",{name}{c}")?;
        }
    }
    writeln!(w)?;
    Ok(())
}

fn write_csv_row<W: Write>(w: &mut W, i: usize, r: &MisalignmentRecord) -> Result<()> {
    let domain = match r.domain {
        Domain::Sim => "sim",
        Domain::PseudoReal => "pseudo_real",
    };
    let split = match r.split() {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    write!(
        w,
        "{i},{},{domain},{split},{},{},{}",
        r.shape_id,
        r.is_free() as u8,
        r.is_unstable() as u8,
        r.lost_contact() as u8
    )?;
    for v in r.offset.to_array().iter().chain(&r.pose).chain(r.signature.values()) {
        write!(w, ",{v}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn encode(probes: usize, columns: usize, stats: &ChannelStats, records: &[MisalignmentRecord]) -> Vec<u8> {
    let n = ContactSignature::ROWS * columns;
    let mut out = Vec::with_capacity(32 + 16 * n + records.len() * (6 + 80 + 8 * n));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(probes as u32).to_le_bytes());
    out.extend_from_slice(&(columns as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for v in stats.mean.iter().chain(&stats.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in records {
        out.extend_from_slice(&r.shape_id.to_le_bytes());
        out.push(r.domain.tag());
        out.push(r.flags);
        for v in r.offset.to_array().iter().chain(&r.pose).chain(r.signature.values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of dataset file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

type Decoded = (usize, usize, ChannelStats, Vec<MisalignmentRecord>);

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let probes = r.u32()? as usize;
    let columns = r.u32()? as usize;
    if columns != probes + 1 {
        return Err(Error::Format(format!("k = {columns} does not equal m + 1 = {}", probes + 1)));
    }
    let count = r.u64()? as usize;
    let n = ContactSignature::ROWS * columns;
    let stats = ChannelStats {
        mean: r.f64s(n)?,
        std: r.f64s(n)?,
    };
    let record_len = 6 + 8 * (10 + n);
    if bytes.len() - r.pos != count * record_len {
        return Err(Error::Format(format!(
            "expected {count} records of {record_len} bytes, found {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let shape_id = r.u32()?;
        let tag = r.u8()?;
        let domain = Domain::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown domain tag {tag}")))?;
        let flags = r.u8()?;
        let offset = MisalignmentOffset::from_array(r.f64s(5)?.try_into().unwrap());
        let pose: [f64; 5] = r.f64s(5)?.try_into().unwrap();
        let signature = ContactSignature::from_values(columns, r.f64s(n)?)?;
        records.push(MisalignmentRecord {
            shape_id,
            domain,
            flags,
            offset,
            pose,
            signature,
        });
    }
    Ok((probes, columns, stats, records))
}

/// Same commanded offset probed in both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRecord {
    pub shape_id: u32,
    pub offset: MisalignmentOffset,
    pub sim: MisalignmentRecord,
    pub real: MisalignmentRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairedConfig {
    pub poses_per_shape: usize,
    pub eval_poses: usize,
    /// Offset redraws allowed when a draw inserts freely.
    pub max_resample: usize,
}

impl Default for PairedConfig {
    fn default() -> Self {
        Self {
            poses_per_shape: 40,
            eval_poses: 20,
            max_resample: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub probes: usize,
    pub columns: usize,
    /// Adaptation pairs, seen shapes only.
    pub train: Vec<PairedRecord>,
    /// Held-out pairs for every shape.
    pub eval: Vec<PairedRecord>,
}

/// Probes identical commanded offsets in the simulator and the pseudo-real
/// domain. Free-inserting offsets are redrawn.
pub fn generate_paired_dataset(
    manifest: &ShapeManifest,
    config: &PairedConfig,
    sim: &SimConfig,
    real: &DomainConfig,
    seed: u64,
    workers: usize,
) -> Result<PairedDataset> {
    let models = models_for(manifest, &sim.contact)?;
    let sim_domain = DomainConfig::sim();
    let mut jobs = Vec::new();
    for id in manifest.seen_ids() {
        for idx in 0..config.poses_per_shape {
            jobs.push((id, idx, PAIRED_STREAM));
        }
    }
    let n_train = jobs.len();
    for s in &manifest.shapes {
        for idx in 0..config.eval_poses {
            jobs.push((s.id, idx, EVAL_STREAM));
        }
    }
    let pairs = run_parallel(workers, &jobs, |&(id, idx, stream)| {
        let model = &models[&id];
        let mut offsets = derive_rng(&[seed, stream, id as u64, idx as u64]);
        for attempt in 0..=config.max_resample {
            let offset = sample_offset(&mut offsets, &sim.bounds);
            let key = [seed, stream, id as u64, idx as u64, attempt as u64];
            let mut rs = derive_rng(&[&key[..], &[0]].concat());
            let s = generate_record(model, id, &offset, sim, &sim_domain, &mut rs)?;
            if s.is_free() {
                continue;
            }
            let mut rr = derive_rng(&[&key[..], &[1]].concat());
            let r = generate_record(model, id, &offset, sim, real, &mut rr)?;
            if r.is_free() {
                continue;
            }
            let split = if stream == PAIRED_STREAM { Split::Train } else { Split::Test };
            return Ok(PairedRecord {
                shape_id: id,
                offset,
                sim: s.with_split(split),
                real: r.with_split(split),
            });
        }
        Err(Error::InsufficientData(format!(
            "shape {id}: no contact offset within {} redraws",
            config.max_resample
        )))
    })?;
    let mut train = pairs;
    let eval = train.split_off(n_train);
    Ok(PairedDataset {
        probes: sim.probe.probes,
        columns: sim.probe.columns(),
        train,
        eval,
    })
}

impl PairedDataset {
    fn flat(&self) -> Vec<MisalignmentRecord> {
        self.train
            .iter()
            .chain(&self.eval)
            .flat_map(|p| [p.sim.clone(), p.real.clone()])
            .collect()
    }

    /// Records are stored as consecutive sim/pseudo-real pairs; the split
    /// bits separate adaptation pairs from held-out ones.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = ContactSignature::ROWS * self.columns;
        encode(self.probes, self.columns, &ChannelStats::identity(n), &self.flat())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (probes, columns, _, records) = decode(bytes)?;
        if records.len() % 2 != 0 {
            return Err(Error::Format("paired file holds an odd number of records".into()));
        }
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for c in records.chunks(2) {
            let (s, r) = (&c[0], &c[1]);
            if s.domain != Domain::Sim || s.shape_id != r.shape_id || s.offset != r.offset {
                return Err(Error::Format("paired records do not match".into()));
            }
            let p = PairedRecord {
                shape_id: s.shape_id,
                offset: s.offset,
                sim: s.clone(),
                real: r.clone(),
            };
            if s.split() == Split::Train {
                train.push(p);
            } else {
                eval.push(p);
            }
        }
        Ok(Self {
            probes,
            columns,
            train,
            eval,
        })
    }

    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_csv_header(&mut w, self.columns)?;
        for (i, r) in self.flat().iter().enumerate() {
            write_csv_row(&mut w, i, r)?;
        }
        Ok(())
    }
}
