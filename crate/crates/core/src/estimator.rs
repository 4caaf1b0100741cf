//! Pose estimation network: force and torque encoders, a fusion stack and
//! separate position and orientation heads.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::contact::ContactSignature;
use crate::dataset::{ChannelStats, ExtrinsicPose, MisalignmentRecord};
use crate::error::{Error, Result};
use crate::geometry::ShapeManifest;
use crate::nn::{adam_step, epoch_batches, gather_rows, mae_batch, AdamState, Cache, CosineSchedule, DenseStack, StackGrads};
use crate::seed::derive_rng;

pub const DEFAULT_WIDTH: usize = 128;

/// Two encoders feeding a fusion stack with two output heads. Inputs are
/// rows whose first `force_inputs` entries go to the force encoder and the
/// rest to the torque encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBranch {
    pub force: DenseStack,
    pub torque: DenseStack,
    pub fusion: DenseStack,
    pub head_a: DenseStack,
    pub head_b: DenseStack,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    force: Cache,
    torque: Cache,
    fusion: Cache,
    head_a: Cache,
    head_b: Cache,
    pub force_feat: Array2<f64>,
    pub torque_feat: Array2<f64>,
    pub fusion_feat: Array2<f64>,
}

/// Gradients of a loss with respect to the intermediate features.
#[derive(Debug, Clone, Default)]
pub struct FeatureGrads {
    pub force: Option<Array2<f64>>,
    pub torque: Option<Array2<f64>>,
    pub fusion: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads {
    pub stacks: Vec<StackGrads>,
}

impl BranchGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.stacks.iter().flat_map(StackGrads::tensors).collect()
    }
}

/// Which stacks an optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Encoders and fusion; heads frozen.
    Backbone,
}

impl TwoBranch {
    pub fn new(force_in: usize, torque_in: usize, width: usize, out_a: usize, out_b: usize, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(&[seed, 0xe5]);
        Ok(Self {
            force: DenseStack::new(&[force_in, width, width, width], &mut rng)?,
            torque: DenseStack::new(&[torque_in, width, width, width], &mut rng)?,
            fusion: DenseStack::new(&[2 * width, width, width, width], &mut rng)?,
            head_a: DenseStack::new(&[width, width, width, out_a], &mut rng)?,
            head_b: DenseStack::new(&[width, width, width, out_b], &mut rng)?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.force.inputs() + self.torque.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.head_a.outputs() + self.head_b.outputs()
    }

    pub fn width(&self) -> usize {
        self.fusion.outputs()
    }

    fn stacks(&self) -> [&DenseStack; 5] {
        [&self.force, &self.torque, &self.fusion, &self.head_a, &self.head_b]
    }

    pub fn param_count(&self) -> usize {
        self.stacks().iter().map(|s| s.param_count()).sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.stacks().into_iter().flat_map(DenseStack::tensors).collect()
    }

    /// Parameter tensors of the trainable stacks, in gradient order.
    pub fn tensors_mut(&mut self, which: Trainable) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        out.extend(self.force.tensors_mut());
        out.extend(self.torque.tensors_mut());
        out.extend(self.fusion.tensors_mut());
        if which == Trainable::All {
            out.extend(self.head_a.tensors_mut());
            out.extend(self.head_b.tensors_mut());
        }
        out
    }

    fn split<'a>(&self, x: &'a ArrayView2<'a, f64>) -> Result<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)> {
        if x.ncols() != self.inputs() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.inputs(),
                got: x.ncols(),
            });
        }
        let k = self.force.inputs();
        Ok((x.slice(s![.., ..k]), x.slice(s![.., k..])))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, BranchCache)> {
        let (xf, xt) = self.split(&x)?;
        let (ff, force) = self.force.forward_batch(xf)?;
        let (tf, torque) = self.torque.forward_batch(xt)?;
        let joined = concatenate![Axis(1), ff, tf];
        let (z, fusion) = self.fusion.forward_batch(joined.view())?;
        let (a, head_a) = self.head_a.forward_batch(z.view())?;
        let (b, head_b) = self.head_b.forward_batch(z.view())?;
        let out = concatenate![Axis(1), a, b];
        Ok((
            out,
            BranchCache {
                force,
                torque,
                fusion,
                head_a,
                head_b,
                force_feat: ff,
                torque_feat: tf,
                fusion_feat: z,
            },
        ))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (z, _, _) = self.features(x)?;
        let a = self.head_a.predict_batch(z.view())?;
        let b = self.head_b.predict_batch(z.view())?;
        Ok(concatenate![Axis(1), a, b])
    }

    /// Fusion, force and torque features for a batch.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let (xf, xt) = self.split(&x)?;
        let ff = self.force.predict_batch(xf)?;
        let tf = self.torque.predict_batch(xt)?;
        let z = self.fusion.predict_batch(concatenate![Axis(1), ff, tf].view())?;
        Ok((z, ff, tf))
    }

    /// Backpropagates an output gradient and/or feature gradients. Head
    /// gradients are zero when no output gradient is given.
    pub fn backward(&self, cache: &BranchCache, d_out: Option<ArrayView2<f64>>, d_feat: &FeatureGrads) -> Result<BranchGrads> {
        let n = cache.fusion_feat.nrows();
        let w = self.width();
        let mut dz = match &d_feat.fusion {
            Some(g) => g.clone(),
            None => Array2::zeros((n, w)),
        };
        let (ga, gb) = match d_out {
            Some(d) => {
                if d.ncols() != self.outputs() {
                    return Err(Error::DimensionMismatch {
                        context: "output gradient",
                        expected: self.outputs(),
                        got: d.ncols(),
                    });
                }
                let na = self.head_a.outputs();
                let (ga, ia) = self.head_a.backward_batch(&cache.head_a, d.slice(s![.., ..na]))?;
                let (gb, ib) = self.head_b.backward_batch(&cache.head_b, d.slice(s![.., na..]))?;
                dz += &ia;
                dz += &ib;
                (ga, gb)
            }
            None => (self.head_a.zero_grads(), self.head_b.zero_grads()),
        };
        let (gfu, dj) = self.fusion.backward_batch(&cache.fusion, dz.view())?;
        let mut df = dj.slice(s![.., ..w]).to_owned();
        let mut dt = dj.slice(s![.., w..]).to_owned();
        if let Some(g) = &d_feat.force {
            df += g;
        }
        if let Some(g) = &d_feat.torque {
            dt += g;
        }
        let (gf, _) = self.force.backward_batch(&cache.force, df.view())?;
        let (gt, _) = self.torque.backward_batch(&cache.torque, dt.view())?;
        Ok(BranchGrads {
            stacks: vec![gf, gt, gfu, ga, gb],
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for s in self.stacks() {
            crate::nn::write_stack(w, s)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let force = crate::nn::read_stack(r)?;
        let torque = crate::nn::read_stack(r)?;
        let fusion = crate::nn::read_stack(r)?;
        let head_a = crate::nn::read_stack(r)?;
        let head_b = crate::nn::read_stack(r)?;
        let w = fusion.outputs();
        if fusion.inputs() != force.outputs() + torque.outputs() || head_a.inputs() != w || head_b.inputs() != w {
            return Err(Error::Format("network stacks do not connect".into()));
        }
        Ok(Self {
            force,
            torque,
            fusion,
            head_a,
            head_b,
        })
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Checks `backward` against central differences on `samples` randomly
/// chosen parameters. The loss is the linear functional
/// `sum(c_out * out) + sum(c_f * features)`, so `backward` receives the
/// weights themselves as upstream gradients. Gradients below `floor` in
/// magnitude are compared absolutely.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    net: &TwoBranch,
    x: ArrayView2<f64>,
    c_out: Option<ArrayView2<f64>>,
    c_feat: &FeatureGrads,
    samples: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradientCheck> {
    use rand::Rng;
    let loss = |n: &TwoBranch| -> Result<f64> {
        let (out, cache) = n.forward(x)?;
        let mut l = 0.0;
        if let Some(c) = &c_out {
            l += (&out * c).sum();
        }
        for (g, f) in [(&c_feat.force, &cache.force_feat), (&c_feat.torque, &cache.torque_feat), (&c_feat.fusion, &cache.fusion_feat)] {
            if let Some(g) = g {
                l += (f * g).sum();
            }
        }
        Ok(l)
    };
    let (_, cache) = net.forward(x)?;
    let grads = net.backward(&cache, c_out, c_feat)?;
    let analytic: Vec<f64> = grads.tensors().concat();
    let mut probe = net.clone();
    let mut rng = derive_rng(&[seed, 0x9c]);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let k = rng.random_range(0..analytic.len());
        let (t, i) = locate(&probe, k);
        let orig = probe.tensors_mut(Trainable::All)[t][i];
        probe.tensors_mut(Trainable::All)[t][i] = orig + h;
        let lp = loss(&probe)?;
        probe.tensors_mut(Trainable::All)[t][i] = orig - h;
        let lm = loss(&probe)?;
        probe.tensors_mut(Trainable::All)[t][i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(crate::nn::relative_error(analytic[k], fd, floor));
    }
    Ok(GradientCheck {
        checked: samples,
        max_rel_error: worst,
    })
}

fn locate(net: &TwoBranch, mut k: usize) -> (usize, usize) {
    for (t, v) in net.tensors().iter().enumerate() {
        if k < v.len() {
            return (t, k);
        }
        k -= v.len();
    }
    panic!("parameter index out of range")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub schedule: CosineSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch: 256,
            schedule: CosineSchedule::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("training loss {loss} at epoch {epoch}")))
    }
}

/// Supervised MAE training of all (or only the backbone) parameters. With a
/// validation set the parameters with the lowest validation MAE are kept.
pub fn fit(
    net: &mut TwoBranch,
    x: &Array2<f64>,
    y: &Array2<f64>,
    val: Option<(&Array2<f64>, &Array2<f64>)>,
    config: &TrainConfig,
    which: Trainable,
) -> Result<Vec<EpochLog>> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::InsufficientData(format!(
            "{} inputs for {} targets",
            x.nrows(),
            y.nrows()
        )));
    }
    let mut rng = derive_rng(&[config.seed, 0x7a1]);
    let mut adam = AdamState::for_tensors(&net.tensors_mut(which).iter().map(|t| &**t).collect::<Vec<_>>());
    let mut history = Vec::with_capacity(config.epochs);
    // The starting weights compete too, so fine-tuning can never end worse
    // on validation than where it began.
    let mut best: Option<(f64, TwoBranch)> = match val {
        Some((vx, vy)) if vx.nrows() > 0 => Some((mae_batch(net.predict(vx.view())?.view(), vy.view())?.0, net.clone())),
        _ => None,
    };
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(epoch);
        let mut total = 0.0;
        for idx in epoch_batches(x.nrows(), config.batch, &mut rng) {
            let xb = gather_rows(x, &idx);
            let yb = gather_rows(y, &idx);
            let (out, cache) = net.forward(xb.view())?;
            let (loss, g) = mae_batch(out.view(), yb.view())?;
            check_finite(loss, epoch)?;
            total += loss * idx.len() as f64;
            let grads = net.backward(&cache, Some(g.view()), &FeatureGrads::default())?;
            let gt = grads.tensors();
            let gt = match which {
                Trainable::All => gt,
                Trainable::Backbone => gt[..net.force.tensors().len() + net.torque.tensors().len() + net.fusion.tensors().len()].to_vec(),
            };
            adam_step(&mut net.tensors_mut(which), &gt, &mut adam, lr)?;
        }
        let train_mae = total / x.nrows() as f64;
        let val_mae = match val {
            Some((vx, vy)) if vx.nrows() > 0 => Some(mae_batch(net.predict(vx.view())?.view(), vy.view())?.0),
            _ => None,
        };
        if let Some(v) = val_mae {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, net.clone()));
            }
        }
        history.push(EpochLog {
            epoch,
            lr,
            train_mae,
            val_mae,
        });
    }
    if let Some((_, b)) = best {
        *net = b;
    }
    Ok(history)
}

/// Stacks signatures into a batch matrix.
pub fn signature_matrix<'a>(sigs: impl IntoIterator<Item = &'a ContactSignature>, stats: &ChannelStats) -> Result<Array2<f64>> {
    let n = stats.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for s in sigs {
        if s.values().len() != n {
            return Err(Error::DimensionMismatch {
                context: "signature length",
                expected: n,
                got: s.values().len(),
            });
        }
        data.extend(stats.standardize(s.values()));
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, n), data).expect("row-major"))
}

pub fn pose_matrix<'a>(poses: impl IntoIterator<Item = &'a ExtrinsicPose>) -> Array2<f64> {
    let data: Vec<f64> = poses.into_iter().flat_map(|p| p.iter().copied()).collect();
    let rows = data.len() / 5;
    Array2::from_shape_vec((rows, 5), data).expect("five columns")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub columns: usize,
    pub width: usize,
    pub stats: ChannelStats,
    pub dataset_hash: String,
}

/// Signature to extrinsic-pose regressor with its input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorNet {
    pub net: TwoBranch,
    pub meta: EstimatorMeta,
}

/// Intermediate features of one signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub force: Vec<f64>,
    pub torque: Vec<f64>,
    pub fusion: Vec<f64>,
}

pub fn build_estimator(columns: usize, width: usize, seed: u64) -> Result<EstimatorNet> {
    if columns == 0 || width == 0 {
        return Err(Error::invalid("estimator needs k >= 1 and width >= 1"));
    }
    let n = ContactSignature::ROWS * columns;
    Ok(EstimatorNet {
        net: TwoBranch::new(2 * columns, 3 * columns, width, 2, 3, seed)?,
        meta: EstimatorMeta {
            columns,
            width,
            stats: ChannelStats::identity(n),
            dataset_hash: String::new(),
        },
    })
}

const EST_MAGIC: &[u8; 4] = b"PFES";

impl EstimatorNet {
    pub fn columns(&self) -> usize {
        self.meta.columns
    }

    fn check(&self, sig: &ContactSignature) -> Result<()> {
        if sig.columns() != self.meta.columns {
            return Err(Error::DimensionMismatch {
                context: "signature columns",
                expected: self.meta.columns,
                got: sig.columns(),
            });
        }
        Ok(())
    }

    pub fn input_matrix<'a>(&self, sigs: impl IntoIterator<Item = &'a ContactSignature>) -> Result<Array2<f64>> {
        signature_matrix(sigs, &self.meta.stats)
    }

    pub fn estimate(&self, sig: &ContactSignature) -> Result<ExtrinsicPose> {
        self.check(sig)?;
        let x = self.input_matrix([sig])?;
        let y = self.net.predict(x.view())?;
        Ok(std::array::from_fn(|i| y[(0, i)]))
    }

    pub fn estimate_batch(&self, sigs: &[&ContactSignature]) -> Result<Vec<ExtrinsicPose>> {
        for s in sigs {
            self.check(s)?;
        }
        let y = self.net.predict(self.input_matrix(sigs.iter().copied())?.view())?;
        Ok(y.rows().into_iter().map(|r| std::array::from_fn(|i| r[i])).collect())
    }

    pub fn extract_features(&self, sig: &ContactSignature) -> Result<Features> {
        self.check(sig)?;
        let x = self.input_matrix([sig])?;
        let (z, f, t) = self.net.features(x.view())?;
        Ok(Features {
            force: f.row(0).to_vec(),
            torque: t.row(0).to_vec(),
            fusion: z.row(0).to_vec(),
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(EST_MAGIC)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        self.net.write(w)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EST_MAGIC {
            return Err(Error::Format("bad estimator magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut meta = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut meta)?;
        let meta: EstimatorMeta = serde_json::from_slice(&meta)?;
        let net = TwoBranch::read(r)?;
        if net.inputs() != ContactSignature::ROWS * meta.columns || net.outputs() != 5 {
            return Err(Error::Format("estimator dimensions disagree with metadata".into()));
        }
        Ok(Self { net, meta })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        self.write(&mut b).expect("writing to memory");
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut &bytes[..])
    }
}

/// Trains the estimator on the usable training records, keeping the
/// checkpoint with the best validation MAE.
pub fn train(
    mut net: EstimatorNet,
    train: &[&MisalignmentRecord],
    val: &[&MisalignmentRecord],
    stats: &ChannelStats,
    dataset_hash: &str,
    config: &TrainConfig,
) -> Result<(EstimatorNet, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no usable training records".into()));
    }
    net.meta.stats = stats.clone();
    net.meta.dataset_hash = dataset_hash.to_string();
    let x = net.input_matrix(train.iter().map(|r| &r.signature))?;
    let y = pose_matrix(train.iter().map(|r| &r.pose));
    let vx = net.input_matrix(val.iter().map(|r| &r.signature))?;
    let vy = pose_matrix(val.iter().map(|r| &r.pose));
    let val = (!val.is_empty()).then_some((&vx, &vy));
    let history = fit(&mut net.net, &x, &y, val, config, Trainable::All)?;
    Ok((net, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub record: usize,
    pub shape_id: u32,
    pub vertices: usize,
    pub seen: bool,
    pub abs_error: [f64; 5],
}

impl RecordError {
    pub fn pos(&self) -> f64 {
        0.5 * (self.abs_error[0] + self.abs_error[1])
    }

    pub fn ori(&self) -> f64 {
        (self.abs_error[2] + self.abs_error[3] + self.abs_error[4]) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub vertices: usize,
    pub seen: bool,
    pub count: usize,
    pub pos_mae: f64,
    pub ori_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAverage {
    pub pos_mae: f64,
    pub ori_mae: f64,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassRow>,
    pub seen: Option<GroupAverage>,
    pub unseen: Option<GroupAverage>,
    pub records: Vec<RecordError>,
}

/// Signed angle difference wrapped into (-180, 180].
pub fn angle_error(a: f64, b: f64) -> f64 {
    crate::contact::wrap_deg(a - b)
}

pub fn pose_abs_error(est: &ExtrinsicPose, truth: &ExtrinsicPose) -> [f64; 5] {
    [
        (est[0] - truth[0]).abs(),
        (est[1] - truth[1]).abs(),
        angle_error(est[2], truth[2]).abs(),
        angle_error(est[3], truth[3]).abs(),
        angle_error(est[4], truth[4]).abs(),
    ]
}

/// Aggregates per-record errors by vertex class; group averages are the
/// mean of their class rows.
pub fn aggregate(records: Vec<RecordError>) -> EvalReport {
    let mut by_class: BTreeMap<usize, (bool, Vec<&RecordError>)> = BTreeMap::new();
    for r in &records {
        by_class.entry(r.vertices).or_insert((r.seen, Vec::new())).1.push(r);
    }
    let classes: Vec<ClassRow> = by_class
        .into_iter()
        .map(|(vertices, (seen, rs))| {
            let n = rs.len() as f64;
            ClassRow {
                vertices,
                seen,
                count: rs.len(),
                pos_mae: rs.iter().map(|r| r.pos()).sum::<f64>() / n,
                ori_mae: rs.iter().map(|r| r.ori()).sum::<f64>() / n,
            }
        })
        .collect();
    let group = |seen: bool| {
        let rows: Vec<_> = classes.iter().filter(|c| c.seen == seen).collect();
        (!rows.is_empty()).then(|| GroupAverage {
            pos_mae: rows.iter().map(|c| c.pos_mae).sum::<f64>() / rows.len() as f64,
            ori_mae: rows.iter().map(|c| c.ori_mae).sum::<f64>() / rows.len() as f64,
            classes: rows.len(),
        })
    };
    EvalReport {
        seen: group(true),
        unseen: group(false),
        classes,
        records,
    }
}

/// Scores predictions against the records' settled poses.
pub fn score(records: &[&MisalignmentRecord], predictions: &[ExtrinsicPose], manifest: &ShapeManifest) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    if records.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            context: "predictions",
            expected: records.len(),
            got: predictions.len(),
        });
    }
    let errors = records
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(i, (r, p))| {
            Ok(RecordError {
                record: i,
                shape_id: r.shape_id,
                vertices: manifest
                    .vertex_count(r.shape_id)
                    .ok_or_else(|| Error::invalid(format!("shape {} not in manifest", r.shape_id)))?,
                seen: manifest.is_seen(r.shape_id),
                abs_error: pose_abs_error(p, &r.pose),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(errors))
}

pub fn evaluate(net: &EstimatorNet, records: &[&MisalignmentRecord], manifest: &ShapeManifest) -> Result<EvalReport> {
    let sigs: Vec<_> = records.iter().map(|r| &r.signature).collect();
    let preds = net.estimate_batch(&sigs)?;
    score(records, &preds, manifest)
}

impl EvalReport {
    /// Table-1-shaped rows: one per vertex class plus the seen/unseen averages.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "group,vertices,count,pos_mae_mm,ori_mae_deg")?;
        for c in &self.classes {
            let g = if c.seen { "seen" } else { "unseen" };
            writeln!(w, "{g},{},{},{:.4},{:.4}", c.vertices, c.count, c.pos_mae, c.ori_mae)?;
        }
        for (name, g) in [("seen", &self.seen), ("unseen", &self.unseen)] {
            if let Some(g) = g {
                writeln!(w, "{name},avg,{},{:.4},{:.4}", g.classes, g.pos_mae, g.ori_mae)?;
            }
        }
        Ok(())
    }
}

/// Feature export for offline embedding: record id, the three feature
/// vectors and the pose label.
pub fn write_features_csv<W: Write>(net: &EstimatorNet, records: &[&MisalignmentRecord], mut w: W) -> Result<()> {
    let width = net.meta.width;
    write!(w, "record,shape_id")?;
    for prefix in ["force", "torque", "fusion"] {
        for i in 0..width {
            write!(w, ",{prefix}{i}")?;
        }
    }
    writeln!(w, ",px,py,ox,oy,oz")?;
    let x = net.input_matrix(records.iter().map(|r| &r.signature))?;
    let (z, f, t) = net.net.features(x.view())?;
    for (i, r) in records.iter().enumerate() {
        write!(w, "{i},{}", r.shape_id)?;
        for v in f.row(i).iter().chain(t.row(i).iter()).chain(z.row(i).iter()) {
            write!(w, ",{v}")?;
        }
        for v in r.pose {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{ContactSignature, DomainConfig};
    use crate::dataset::{generate_dataset, DatasetConfig, SimConfig, Split};
    use crate::geometry::{generate_shape_set, ShapeSetConfig};
    use ndarray::Array2;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive_rng(&[seed]);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.5..1.5))
    }

    fn tiny_data() -> (ShapeManifest, crate::dataset::Dataset) {
        let cfg = ShapeSetConfig {
            seen_classes: vec![4, 6],
            unseen_classes: vec![8],
            seen_per_class: 1,
            unseen_per_class: 1,
            ..ShapeSetConfig::default()
        };
        let m = generate_shape_set(&cfg, 2).unwrap();
        let d = DatasetConfig {
            train_per_shape: 40,
            val_per_shape: 8,
            test_per_shape: 8,
            unseen_per_shape: 8,
        };
        let ds = generate_dataset(&m, &d, &SimConfig::default(), &DomainConfig::sim(), 4, 1).unwrap();
        (m, ds)
    }

    #[test]
    fn estimator_shapes_and_seeding() {
        let a = build_estimator(5, DEFAULT_WIDTH, 1).unwrap();
        assert_eq!((a.net.force.inputs(), a.net.torque.inputs()), (10, 15));
        assert_eq!(a.net.outputs(), 5);
        assert_eq!(a, build_estimator(5, DEFAULT_WIDTH, 1).unwrap());
        assert_ne!(a, build_estimator(5, DEFAULT_WIDTH, 2).unwrap());
        assert!(build_estimator(0, 8, 1).is_err());
    }

    #[test]
    fn zero_signature_gives_zero_pose() {
        let net = build_estimator(5, DEFAULT_WIDTH, 3).unwrap();
        let sig = ContactSignature::from_values(5, vec![0.0; 25]).unwrap();
        assert_eq!(net.estimate(&sig).unwrap(), [0.0; 5]);
        let wrong = ContactSignature::from_values(4, vec![0.0; 20]).unwrap();
        assert!(net.estimate(&wrong).is_err());
    }

    #[test]
    fn features_feed_the_heads() {
        let net = build_estimator(5, DEFAULT_WIDTH, 3).unwrap();
        let sig = ContactSignature::from_values(5, (0..25).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let f = net.extract_features(&sig).unwrap();
        assert_eq!((f.force.len(), f.torque.len(), f.fusion.len()), (128, 128, 128));
        let z = Array2::from_shape_vec((1, 128), f.fusion).unwrap();
        let a = net.net.head_a.predict_batch(z.view()).unwrap();
        let b = net.net.head_b.predict_batch(z.view()).unwrap();
        let e = net.estimate(&sig).unwrap();
        assert_eq!(e, [a[(0, 0)], a[(0, 1)], b[(0, 0)], b[(0, 1)], b[(0, 2)]]);
        assert_eq!(e, net.estimate(&sig).unwrap());
    }

    fn check(net: &TwoBranch, seed: u64) {
        let n = 4;
        let x = random_matrix(n, net.inputs(), seed);
        let c = random_matrix(n, net.outputs(), seed + 1);
        let r = gradient_check(net, x.view(), Some(c.view()), &FeatureGrads::default(), 1000, 1e-5, 1e-6, seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "output path {r:?}");
        let w = net.width();
        let feats = FeatureGrads {
            force: Some(random_matrix(n, w, seed + 2)),
            torque: Some(random_matrix(n, w, seed + 3)),
            fusion: Some(random_matrix(n, w, seed + 4)),
        };
        let r = gradient_check(net, x.view(), None, &feats, 300, 1e-5, 1e-6, seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "feature path {r:?}");
    }

    fn after_steps(mut net: TwoBranch, steps: usize) -> TwoBranch {
        let x = random_matrix(16, net.inputs(), 50);
        let y = random_matrix(16, net.outputs(), 51);
        let cfg = TrainConfig {
            epochs: steps,
            batch: 16,
            ..TrainConfig::default()
        };
        fit(&mut net, &x, &y, None, &cfg, Trainable::All).unwrap();
        net
    }

    #[test]
    fn estimator_gradients_match_finite_differences() {
        let net = build_estimator(5, DEFAULT_WIDTH, 7).unwrap().net;
        check(&net, 10);
        check(&after_steps(net, 10), 20);
    }

    #[test]
    fn converter_gradients_match_finite_differences() {
        // Signature-to-signature network used for data-level adaptation.
        let net = TwoBranch::new(10, 15, DEFAULT_WIDTH, 10, 15, 8).unwrap();
        check(&net, 30);
        check(&after_steps(net, 10), 40);
    }

    #[test]
    fn one_epoch_reduces_linear_regression_error() {
        let x = random_matrix(512, 25, 60);
        let a = random_matrix(25, 5, 61);
        let y = x.dot(&a);
        let mut net = build_estimator(5, 32, 62).unwrap().net;
        let before = mae_batch(net.predict(x.view()).unwrap().view(), y.view()).unwrap().0;
        let cfg = TrainConfig {
            epochs: 1,
            batch: 32,
            ..TrainConfig::default()
        };
        fit(&mut net, &x, &y, None, &cfg, Trainable::All).unwrap();
        let after = mae_batch(net.predict(x.view()).unwrap().view(), y.view()).unwrap().0;
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn training_is_deterministic_and_follows_schedule() {
        let (_, ds) = tiny_data();
        let tr = ds.usable(Split::Train);
        let va = ds.usable(Split::Val);
        let cfg = TrainConfig {
            epochs: 5,
            batch: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || train(build_estimator(5, 16, 1).unwrap(), &tr, &va, &ds.stats, "h", &cfg).unwrap();
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ha, hb);
        for h in &ha {
            assert_eq!(h.lr, crate::nn::cosine_lr(&cfg.schedule, h.epoch));
        }
        assert_eq!(EstimatorNet::from_bytes(&a.to_bytes()).unwrap(), a);
        assert_eq!(a.meta.dataset_hash, "h");
    }

    #[test]
    fn training_error_drops_within_twenty_epochs() {
        let (_, ds) = tiny_data();
        let tr = ds.usable(Split::Train);
        let mut gains = 0.0;
        for seed in 0..3 {
            let cfg = TrainConfig {
                epochs: 21,
                batch: 16,
                seed,
                ..TrainConfig::default()
            };
            let (_, h) = train(build_estimator(5, 32, seed).unwrap(), &tr, &[], &ds.stats, "", &cfg).unwrap();
            gains += h[0].train_mae - h[20].train_mae;
        }
        assert!(gains > 0.0);
    }

    #[test]
    fn evaluation_aggregates() {
        let (m, ds) = tiny_data();
        let test = ds.usable(Split::Test);
        let truth: Vec<ExtrinsicPose> = test.iter().map(|r| r.pose).collect();
        let perfect = score(&test, &truth, &m).unwrap();
        assert!(perfect.classes.iter().all(|c| c.pos_mae == 0.0 && c.ori_mae == 0.0));
        assert_eq!(perfect.seen.as_ref().unwrap().pos_mae, 0.0);

        let net = build_estimator(5, 16, 9).unwrap();
        let rep = evaluate(&net, &test, &m).unwrap();
        // Recompute class means from the stored per-record errors.
        for c in &rep.classes {
            let rs: Vec<_> = rep.records.iter().filter(|r| r.vertices == c.vertices).collect();
            assert_eq!(rs.len(), c.count);
            let pos = rs.iter().map(|r| (r.abs_error[0] + r.abs_error[1]) / 2.0).sum::<f64>() / rs.len() as f64;
            assert!((pos - c.pos_mae).abs() < 1e-12);
        }
        // Record order does not matter.
        let mut rev = test.clone();
        rev.reverse();
        let again = evaluate(&net, &rev, &m).unwrap();
        for (a, b) in rep.classes.iter().zip(&again.classes) {
            assert_eq!(a.count, b.count);
            assert!((a.pos_mae - b.pos_mae).abs() < 1e-12 && (a.ori_mae - b.ori_mae).abs() < 1e-12);
        }
        let mut csv = Vec::new();
        write_features_csv(&net, &test, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), test.len() + 1);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 3 * 16 + 5);
    }

    #[test]
    fn angle_errors_wrap() {
        assert!((angle_error(179.0, -179.0) + 2.0).abs() < 1e-12);
        assert_eq!(pose_abs_error(&[1.0, -1.0, 0.0, 0.0, 0.0], &[0.0; 5]), [1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
