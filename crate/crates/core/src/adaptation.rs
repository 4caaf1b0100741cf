//! Sim-to-pseudo-real adaptation: a signature conversion network (DLA),
//! feature distillation (FLA), fine-tuning and their combination.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::contact::ContactSignature;
use crate::dataset::{ChannelStats, ExtrinsicPose, MisalignmentRecord, PairedDataset, PairedRecord};
use crate::error::{Error, Result};
use crate::estimator::{
    fit, pose_matrix, score, signature_matrix, EpochLog, EstimatorNet, EvalReport, FeatureGrads, Trainable,
    TrainConfig, TwoBranch,
};
use crate::geometry::ShapeManifest;
use crate::nn::{adam_step, epoch_batches, gather_rows, mae_batch, read_f64s, AdamState, CosineSchedule};
use crate::seed::derive_rng;

pub const MIN_PAIRS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dla,
    Fla,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub dla: TrainConfig,
    pub fla: TrainConfig,
    pub fine_tune: TrainConfig,
    pub width: usize,
    /// Every n-th training pair is held out for fine-tuning checkpoint
    /// selection; 0 trains on all pairs and keeps the last epoch.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            dla: TrainConfig {
                epochs: 300,
                batch: 32,
                ..TrainConfig::default()
            },
            fla: TrainConfig {
                epochs: 100,
                batch: 32,
                ..TrainConfig::default()
            },
            fine_tune: TrainConfig {
                epochs: 100,
                batch: 32,
                schedule: CosineSchedule {
                    lr_max: 1e-4,
                    lr_min: 0.0,
                    period: 100,
                },
                seed: 0,
            },
            width: crate::estimator::DEFAULT_WIDTH,
            holdout_every: 5,
            seed: 0,
        }
    }
}

fn usable_pairs(pairs: &[PairedRecord]) -> Result<Vec<&PairedRecord>> {
    let ok: Vec<_> = pairs.iter().filter(|p| p.sim.usable() && p.real.usable()).collect();
    if ok.len() < MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "{} usable pairs, at least {MIN_PAIRS} required",
            ok.len()
        )));
    }
    Ok(ok)
}

/// Maps pseudo-real signatures to simulator-like ones: a least-squares
/// affine map in standardized space plus a two-branch network that models
/// what the affine part leaves over.
#[derive(Debug, Clone, PartialEq)]
pub struct DlaNet {
    /// `(n + 1) x n`; the last row is the offset.
    pub affine: Array2<f64>,
    pub net: TwoBranch,
    pub real_stats: ChannelStats,
    pub sim_stats: ChannelStats,
}

impl DlaNet {
    pub fn columns(&self) -> usize {
        self.real_stats.len() / ContactSignature::ROWS
    }

    pub fn convert(&self, sig: &ContactSignature) -> Result<ContactSignature> {
        Ok(self.convert_batch(&[sig])?.remove(0))
    }

    pub fn convert_batch(&self, sigs: &[&ContactSignature]) -> Result<Vec<ContactSignature>> {
        let x = signature_matrix(sigs.iter().copied(), &self.real_stats)?;
        let y = apply_affine(&self.affine, &x) + self.net.predict(x.view())?;
        y.rows()
            .into_iter()
            .map(|r| ContactSignature::from_values(self.columns(), self.sim_stats.destandardize(&r.to_vec())))
            .collect()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let stats = serde_json::to_vec(&(&self.real_stats, &self.sim_stats))?;
        w.write_all(&(stats.len() as u64).to_le_bytes())?;
        w.write_all(&stats)?;
        for d in self.affine.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in self.affine.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        self.net.write(w)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let (real_stats, sim_stats): (ChannelStats, ChannelStats) = serde_json::from_slice(&read_blob(r)?)?;
        let mut dims = [0usize; 2];
        for d in &mut dims {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *d = u64::from_le_bytes(b) as usize;
        }
        let n = real_stats.len();
        if dims != [n + 1, sim_stats.len()] {
            return Err(Error::Format(format!("affine map shape {dims:?} does not fit {n} inputs")));
        }
        let affine = Array2::from_shape_vec((dims[0], dims[1]), read_f64s(r, dims[0] * dims[1])?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let net = TwoBranch::read(r)?;
        if net.inputs() != real_stats.len() || net.outputs() != sim_stats.len() {
            return Err(Error::Format("conversion network dimensions disagree with its statistics".into()));
        }
        Ok(Self {
            affine,
            net,
            real_stats,
            sim_stats,
        })
    }
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn apply_affine(a: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let n = x.ncols();
    x.dot(&a.slice(s![..n, ..])) + a.row(n)
}

/// Minimum-norm least-squares affine map from `x` rows to `y` rows.
fn fit_affine(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, n) = x.dim();
    let xa = DMatrix::from_fn(m, n + 1, |i, j| if j < n { x[(i, j)] } else { 1.0 });
    let ya = DMatrix::from_fn(m, y.ncols(), |i, j| y[(i, j)]);
    let sol = xa
        .svd(true, true)
        .solve(&ya, 1e-9)
        .map_err(|e| Error::InvalidState(format!("affine fit failed: {e}")))?;
    Ok(Array2::from_shape_fn((n + 1, y.ncols()), |(i, j)| sol[(i, j)]))
}

/// Fits the affine part in closed form, then trains the network on the
/// residual with the sim half as the target. The heads' output layers
/// start at zero so training begins from the affine map.
pub fn train_dla(pairs: &[PairedRecord], columns: usize, config: &AdaptConfig) -> Result<(DlaNet, Vec<EpochLog>)> {
    let ok = usable_pairs(pairs)?;
    let n = ContactSignature::ROWS * columns;
    let real_stats = ChannelStats::from_rows(ok.iter().map(|p| p.real.signature.values()), n)?;
    let sim_stats = ChannelStats::from_rows(ok.iter().map(|p| p.sim.signature.values()), n)?;
    let x = signature_matrix(ok.iter().map(|p| &p.real.signature), &real_stats)?;
    let y = signature_matrix(ok.iter().map(|p| &p.sim.signature), &sim_stats)?;
    let affine = fit_affine(&x, &y)?;
    let residual = &y - &apply_affine(&affine, &x);
    let mut net = TwoBranch::new(2 * columns, 3 * columns, config.width, 2 * columns, 3 * columns, config.seed ^ 0xd1a)?;
    for head in [&mut net.head_a, &mut net.head_b] {
        let mut t = head.tensors_mut();
        let k = t.len();
        for layer in &mut t[k - 2..] {
            layer.fill(0.0);
        }
    }
    let history = fit(&mut net, &x, &residual, None, &config.dla, Trainable::All)?;
    Ok((
        DlaNet {
            affine,
            net,
            real_stats,
            sim_stats,
        },
        history,
    ))
}

/// Copies `sim_net` and trains its encoders and fusion stack so that its
/// features on `real` inputs match the frozen `sim_net` features on the
/// paired `sim` inputs. Heads are left untouched.
pub fn distill(
    sim_net: &EstimatorNet,
    real: &[&ContactSignature],
    sim: &[&ContactSignature],
    config: &TrainConfig,
) -> Result<(EstimatorNet, Vec<EpochLog>)> {
    if real.len() != sim.len() {
        return Err(Error::DimensionMismatch {
            context: "distillation pairs",
            expected: sim.len(),
            got: real.len(),
        });
    }
    if real.len() < MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "{} distillation pairs, at least {MIN_PAIRS} required",
            real.len()
        )));
    }
    let x = sim_net.input_matrix(real.iter().copied())?;
    let xs = sim_net.input_matrix(sim.iter().copied())?;
    let (tz, tf, tt) = sim_net.net.features(xs.view())?;
    let mut student = sim_net.clone();
    let mut rng = derive_rng(&[config.seed, 0xf1a]);
    let backbone = student.net.force.tensors().len() + student.net.torque.tensors().len() + student.net.fusion.tensors().len();
    let mut adam = AdamState::for_tensors(&student.net.tensors()[..backbone]);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(epoch);
        let mut total = 0.0;
        for idx in epoch_batches(x.nrows(), config.batch, &mut rng) {
            let xb = gather_rows(&x, &idx);
            let (_, cache) = student.net.forward(xb.view())?;
            let (lf, gf) = mae_batch(cache.force_feat.view(), gather_rows(&tf, &idx).view())?;
            let (lt, gt) = mae_batch(cache.torque_feat.view(), gather_rows(&tt, &idx).view())?;
            let (lz, gz) = mae_batch(cache.fusion_feat.view(), gather_rows(&tz, &idx).view())?;
            let loss = lf + lt + lz;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("distillation loss {loss} at epoch {epoch}")));
            }
            total += loss * idx.len() as f64;
            let grads = student.net.backward(
                &cache,
                None,
                &FeatureGrads {
                    force: Some(gf),
                    torque: Some(gt),
                    fusion: Some(gz),
                },
            )?;
            let g = grads.tensors();
            adam_step(&mut student.net.tensors_mut(Trainable::Backbone), &g[..backbone], &mut adam, lr)?;
        }
        history.push(EpochLog {
            epoch,
            lr,
            train_mae: total / x.nrows() as f64,
            val_mae: None,
        });
    }
    Ok((student, history))
}

/// Feature-level adaptation on the raw pseudo-real signatures of the pairs.
pub fn distill_fla(sim_net: &EstimatorNet, pairs: &[PairedRecord], config: &TrainConfig) -> Result<(EstimatorNet, Vec<EpochLog>)> {
    let ok = usable_pairs(pairs)?;
    let real: Vec<_> = ok.iter().map(|p| &p.real.signature).collect();
    let sim: Vec<_> = ok.iter().map(|p| &p.sim.signature).collect();
    distill(sim_net, &real, &sim, config)
}

/// Supervised training of every parameter on (signature, pose) examples.
/// Every `holdout_every`-th example is held out for checkpoint selection
/// (0 disables); the returned net is the best on the held-out part,
/// counting the starting weights.
pub fn fine_tune(
    net: &EstimatorNet,
    sigs: &[&ContactSignature],
    poses: &[ExtrinsicPose],
    config: &TrainConfig,
    holdout_every: usize,
) -> Result<(EstimatorNet, Vec<EpochLog>)> {
    if sigs.len() != poses.len() {
        return Err(Error::DimensionMismatch {
            context: "fine-tuning examples",
            expected: poses.len(),
            got: sigs.len(),
        });
    }
    let mut out = net.clone();
    if config.epochs == 0 {
        return Ok((out, Vec::new()));
    }
    let held = |i: usize| holdout_every > 1 && i % holdout_every == holdout_every - 1;
    let pick = |keep: bool| -> Result<(Array2<f64>, Array2<f64>)> {
        let idx: Vec<usize> = (0..sigs.len()).filter(|&i| held(i) != keep).collect();
        Ok((
            net.input_matrix(idx.iter().map(|&i| sigs[i]))?,
            pose_matrix(idx.iter().map(|&i| &poses[i])),
        ))
    };
    let (x, y) = pick(true)?;
    let (vx, vy) = pick(false)?;
    let val = (vx.nrows() > 0).then_some((&vx, &vy));
    let history = fit(&mut out.net, &x, &y, val, config, Trainable::All)?;
    Ok((out, history))
}

/// Estimator for the pseudo-real domain, optionally preceded by a
/// conversion network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedEstimator {
    pub dla: Option<DlaNet>,
    pub net: EstimatorNet,
    pub methods: Vec<Method>,
    pub paired_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub methods: Vec<Method>,
    pub paired_hash: String,
    pub estimator_dataset_hash: String,
}

const BUNDLE_MAGIC: &[u8; 4] = b"PFAD";

impl AdaptedEstimator {
    /// The unadapted simulator estimator.
    pub fn plain(net: &EstimatorNet, paired_hash: &str) -> Self {
        Self {
            dla: None,
            net: net.clone(),
            methods: Vec::new(),
            paired_hash: paired_hash.to_string(),
        }
    }

    pub fn columns(&self) -> usize {
        self.net.columns()
    }

    pub fn estimate(&self, sig: &ContactSignature) -> Result<ExtrinsicPose> {
        match &self.dla {
            Some(d) => self.net.estimate(&d.convert(sig)?),
            None => self.net.estimate(sig),
        }
    }

    pub fn estimate_batch(&self, sigs: &[&ContactSignature]) -> Result<Vec<ExtrinsicPose>> {
        match &self.dla {
            Some(d) => {
                let conv = d.convert_batch(sigs)?;
                self.net.estimate_batch(&conv.iter().collect::<Vec<_>>())
            }
            None => self.net.estimate_batch(sigs),
        }
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            methods: self.methods.clone(),
            paired_hash: self.paired_hash.clone(),
            estimator_dataset_hash: self.net.meta.dataset_hash.clone(),
        }
    }

    pub fn check_provenance(&self, paired_hash: &str) -> Result<()> {
        if self.paired_hash != paired_hash {
            return Err(Error::Provenance {
                expected: self.paired_hash.clone(),
                found: paired_hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BUNDLE_MAGIC)?;
        let prov = serde_json::to_vec(&self.provenance())?;
        w.write_all(&(prov.len() as u64).to_le_bytes())?;
        w.write_all(&prov)?;
        match &self.dla {
            Some(d) => {
                w.write_all(&[1])?;
                d.write(w)?;
            }
            None => w.write_all(&[0])?,
        }
        self.net.write(w)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Format("bad adaptation bundle magic".into()));
        }
        let prov: Provenance = serde_json::from_slice(&read_blob(r)?)?;
        let mut flag = [0u8];
        r.read_exact(&mut flag)?;
        let dla = if flag[0] == 1 { Some(DlaNet::read(r)?) } else { None };
        let net = EstimatorNet::read(r)?;
        Ok(Self {
            dla,
            net,
            methods: prov.methods,
            paired_hash: prov.paired_hash,
        })
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

/// Every adapted variant compared in the method table.
#[derive(Debug, Clone)]
pub struct AdaptationSuite {
    pub without: AdaptedEstimator,
    pub dla: AdaptedEstimator,
    pub fla: AdaptedEstimator,
    pub fine_tune: AdaptedEstimator,
    pub ours: AdaptedEstimator,
}

/// Conversion first, then distillation on converted inputs, then
/// fine-tuning on converted inputs.
pub fn adapt_full(sim_net: &EstimatorNet, paired: &PairedDataset, config: &AdaptConfig) -> Result<AdaptedEstimator> {
    let hash = paired.hash();
    let (dla, _) = train_dla(&paired.train, paired.columns, config)?;
    ours_from(sim_net, paired, &dla, &hash, config)
}

fn ours_from(sim_net: &EstimatorNet, paired: &PairedDataset, dla: &DlaNet, hash: &str, config: &AdaptConfig) -> Result<AdaptedEstimator> {
    let ok = usable_pairs(&paired.train)?;
    let real: Vec<_> = ok.iter().map(|p| &p.real.signature).collect();
    let sim: Vec<_> = ok.iter().map(|p| &p.sim.signature).collect();
    let converted = dla.convert_batch(&real)?;
    let conv: Vec<_> = converted.iter().collect();
    let (student, _) = distill(sim_net, &conv, &sim, &config.fla)?;
    let poses: Vec<_> = ok.iter().map(|p| p.real.pose).collect();
    let (tuned, _) = fine_tune(&student, &conv, &poses, &config.fine_tune, config.holdout_every)?;
    Ok(AdaptedEstimator {
        dla: Some(dla.clone()),
        net: tuned,
        methods: vec![Method::Dla, Method::Fla, Method::FineTune],
        paired_hash: hash.to_string(),
    })
}

/// Builds the unadapted baseline, each single method and the combination.
pub fn adapt_all(sim_net: &EstimatorNet, paired: &PairedDataset, config: &AdaptConfig) -> Result<AdaptationSuite> {
    let hash = paired.hash();
    let (dla, _) = train_dla(&paired.train, paired.columns, config)?;
    let (fla, _) = distill_fla(sim_net, &paired.train, &config.fla)?;
    let ok = usable_pairs(&paired.train)?;
    let real: Vec<_> = ok.iter().map(|p| &p.real.signature).collect();
    let poses: Vec<_> = ok.iter().map(|p| p.real.pose).collect();
    let (ft, _) = fine_tune(sim_net, &real, &poses, &config.fine_tune, config.holdout_every)?;
    let ours = ours_from(sim_net, paired, &dla, &hash, config)?;
    let with = |dla: Option<DlaNet>, net: EstimatorNet, methods: Vec<Method>| AdaptedEstimator {
        dla,
        net,
        methods,
        paired_hash: hash.clone(),
    };
    Ok(AdaptationSuite {
        without: AdaptedEstimator::plain(sim_net, &hash),
        dla: with(Some(dla), sim_net.clone(), vec![Method::Dla]),
        fla: with(None, fla, vec![Method::Fla]),
        fine_tune: with(None, ft, vec![Method::FineTune]),
        ours,
    })
}

/// Scores an adapted estimator on the held-out pseudo-real records of a
/// paired dataset it was built from.
pub fn evaluate_adapted(adapted: &AdaptedEstimator, paired: &PairedDataset, manifest: &ShapeManifest) -> Result<EvalReport> {
    adapted.check_provenance(&paired.hash())?;
    let recs: Vec<&MisalignmentRecord> = paired.eval.iter().map(|p| &p.real).filter(|r| r.usable()).collect();
    let sigs: Vec<_> = recs.iter().map(|r| &r.signature).collect();
    let preds = adapted.estimate_batch(&sigs)?;
    score(&recs, &preds, manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub seen_pos: f64,
    pub seen_ori: f64,
    pub unseen_pos: f64,
    pub unseen_ori: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTable {
    pub rows: Vec<MethodRow>,
}

impl AdaptationSuite {
    pub fn entries(&self) -> [(&'static str, &AdaptedEstimator); 5] {
        [
            ("w/o Adaptation", &self.without),
            ("DLA", &self.dla),
            ("FLA", &self.fla),
            ("Fine-tuning", &self.fine_tune),
            ("Ours", &self.ours),
        ]
    }

    pub fn table(&self, paired: &PairedDataset, manifest: &ShapeManifest) -> Result<MethodTable> {
        let rows = self
            .entries()
            .into_iter()
            .map(|(name, est)| {
                let r = evaluate_adapted(est, paired, manifest)?;
                let nan = f64::NAN;
                Ok(MethodRow {
                    method: name.to_string(),
                    seen_pos: r.seen.as_ref().map_or(nan, |g| g.pos_mae),
                    seen_ori: r.seen.as_ref().map_or(nan, |g| g.ori_mae),
                    unseen_pos: r.unseen.as_ref().map_or(nan, |g| g.pos_mae),
                    unseen_ori: r.unseen.as_ref().map_or(nan, |g| g.ori_mae),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MethodTable { rows })
    }
}

impl MethodTable {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "method,seen_pos_mm,seen_ori_deg,unseen_pos_mm,unseen_ori_deg")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.4},{:.4},{:.4},{:.4}",
                r.method, r.seen_pos, r.seen_ori, r.unseen_pos, r.unseen_ori
            )?;
        }
        Ok(())
    }
}
