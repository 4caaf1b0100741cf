//! Dense ReLU stacks with hand-written backprop, MAE loss, Adam and a
//! cosine learning-rate schedule.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub relu: bool,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }
}

/// Dense layers with ReLU on every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    pub layers: Vec<Dense>,
}

/// Activations kept from a forward pass: the input of every layer and the
/// final output.
#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Parameter gradients in the same order as [`DenseStack::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl StackGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice().expect("standard layout"), b.as_slice().expect("standard layout")])
            .collect()
    }
}

impl DenseStack {
    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let limit = (6.0 / d[0] as f64).sqrt();
                let w = Array2::from_shape_simple_fn((d[1], d[0]), || rng.random_range(-limit..limit));
                Dense {
                    w,
                    b: Array1::zeros(d[1]),
                    relu: i != last,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty stack").outputs()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.inputs()];
        d.extend(self.layers.iter().map(Dense::outputs));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().expect("standard layout"), l.b.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn zero_grads(&self) -> StackGrads {
        StackGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.len())))
                .collect(),
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.inputs() {
            return Err(Error::DimensionMismatch {
                context: "dense stack input",
                expected: self.inputs(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Forward pass on a batch (one sample per row).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Cache)> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let z = h.dot(&l.w.t()) + &l.b;
            let a = if l.relu { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok((h, Cache { inputs, pre }))
    }

    /// Forward pass without keeping activations.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.w.t()) + &l.b;
            if l.relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Reverse pass: parameter gradients and the gradient with respect to
    /// the batch input.
    pub fn backward_batch(&self, cache: &Cache, grad_out: ArrayView2<f64>) -> Result<(StackGrads, Array2<f64>)> {
        let n = self.layers.len();
        if cache.inputs.len() != n {
            return Err(Error::DimensionMismatch {
                context: "backward cache",
                expected: n,
                got: cache.inputs.len(),
            });
        }
        if grad_out.ncols() != self.outputs() || grad_out.nrows() != cache.inputs[0].nrows() {
            return Err(Error::DimensionMismatch {
                context: "output gradient",
                expected: self.outputs(),
                got: grad_out.ncols(),
            });
        }
        let mut g = grad_out.to_owned();
        let mut layers = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let l = &self.layers[i];
            if l.relu {
                g.zip_mut_with(&cache.pre[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let dw = g.t().dot(&cache.inputs[i]).as_standard_layout().into_owned();
            let db = g.sum_axis(Axis(0));
            let gin = g.dot(&l.w);
            layers.push((dw, db));
            g = gin;
        }
        layers.reverse();
        Ok((StackGrads { layers }, g))
    }
}

/// Mean absolute error and its subgradient (zero at ties).
pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() {
        return Err(Error::invalid("MAE of an empty vector"));
    }
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "MAE",
            expected: pred.len(),
            got: target.len(),
        });
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// Batch MAE averaged over every entry of the matrix.
pub fn mae_batch(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::DimensionMismatch {
            context: "batch MAE",
            expected: pred.len(),
            got: target.len(),
        });
    }
    let p = pred.as_standard_layout();
    let t = target.as_standard_layout();
    let (loss, g) = mae_loss(p.as_slice().expect("standard"), t.as_slice().expect("standard"))?;
    Ok((loss, Array2::from_shape_vec(pred.raw_dim(), g).expect("same shape")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tensors(tensors: &[&[f64]]) -> Self {
        Self::new(&tensors.iter().map(|t| t.len()).collect::<Vec<_>>())
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient
/// entry is non-finite.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            context: "adam tensors",
            expected: state.m.len(),
            got: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || g.len() != state.m[i].len() {
            return Err(Error::DimensionMismatch {
                context: "adam tensor",
                expected: state.m[i].len(),
                got: g.len(),
            });
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient tensor {i} entry {j} is {}", g[j])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: usize,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 0.0,
            period: 100,
        }
    }
}

impl CosineSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let period = self.period.max(1);
        let phase = (epoch % period) as f64 / period as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, epoch: usize) -> f64 {
    schedule.lr(epoch)
}

/// Central-difference derivative of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] = x[i] + h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Shuffled mini-batch index lists for one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Gathers rows of `x` into a new matrix.
pub fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

const STACK_MAGIC: &[u8; 4] = b"PFNN";

pub fn write_stack<W: Write>(w: &mut W, s: &DenseStack) -> Result<()> {
    w.write_all(STACK_MAGIC)?;
    w.write_all(&(s.layers.len() as u32).to_le_bytes())?;
    for l in &s.layers {
        w.write_all(&(l.inputs() as u32).to_le_bytes())?;
        w.write_all(&(l.outputs() as u32).to_le_bytes())?;
        w.write_all(&[l.relu as u8])?;
        for v in l.w.iter().chain(l.b.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_stack<R: Read>(r: &mut R) -> Result<DenseStack> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STACK_MAGIC {
        return Err(Error::Format("bad network magic".into()));
    }
    let n = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let inputs = read_u32(r)? as usize;
        let outputs = read_u32(r)? as usize;
        let mut relu = [0u8];
        r.read_exact(&mut relu)?;
        let w = Array2::from_shape_vec((outputs, inputs), read_f64s(r, inputs * outputs)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let b = Array1::from(read_f64s(r, outputs)?);
        layers.push(Dense { w, b, relu: relu[0] != 0 });
    }
    for pair in layers.windows(2) {
        if pair[0].outputs() != pair[1].inputs() {
            return Err(Error::Format("layer dimensions do not chain".into()));
        }
    }
    if layers.is_empty() {
        return Err(Error::Format("empty network".into()));
    }
    Ok(DenseStack { layers })
}

pub fn write_adam<W: Write>(w: &mut W, s: &AdamState) -> Result<()> {
    w.write_all(&(s.m.len() as u32).to_le_bytes())?;
    w.write_all(&s.step.to_le_bytes())?;
    for v in [s.beta1, s.beta2, s.eps] {
        w.write_all(&v.to_le_bytes())?;
    }
    for (m, v) in s.m.iter().zip(&s.v) {
        w.write_all(&(m.len() as u64).to_le_bytes())?;
        for x in m.iter().chain(v) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_adam<R: Read>(r: &mut R) -> Result<AdamState> {
    let n = read_u32(r)? as usize;
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let step = u64::from_le_bytes(b);
    let c = read_f64s(r, 3)?;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b)?;
        let len = u64::from_le_bytes(b) as usize;
        let mut both = read_f64s(r, 2 * len)?;
        v.push(both.split_off(len));
        m.push(both);
    }
    Ok(AdamState {
        beta1: c[0],
        beta2: c[1],
        eps: c[2],
        step,
        m,
        v,
    })
}
