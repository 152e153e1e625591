//! Training loop: pseudo-apex sampling, Adam, exponential learning-rate decay.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonet::{Graph, NetError, ParamStore, Tensor};
use crate::flow::{optical_flow_image, FlowError, FlowParams, OpticalFlowImage};
use crate::imaging::{load_frame, load_tensor, store_tensor, Image, ImagingError, Plane};
use crate::infusenet::{build_forward, place_params, BackboneConfig, MaskMode, ModelError, NUM_AUS};
use crate::magnify::{decode, encode, magnify_pair, resize_bilinear, MagConfig, MagnifyError};
use crate::scalar::Scalar;
use crate::synth::{sub_seed, Manifest, SampleRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("apex index {apex} outside a sequence of {len} frames")]
    InvalidApex { apex: usize, len: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("sample {id}: {msg}")]
    Sample { id: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Magnify(#[from] MagnifyError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bce,
    SoftmaxCe,
}

/// The `train` section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub max_offset: usize,
    pub loss: LossKind,
    pub aux_flow_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            gamma: 0.9,
            epochs: 50,
            batch: 8,
            seed: 0,
            max_offset: 5,
            loss: LossKind::Bce,
            aux_flow_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::InvalidConfig("batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// `base_lr * gamma^epoch`.
pub fn lr_at_epoch(base_lr: f64, gamma: f64, epoch: usize) -> f64 {
    base_lr * gamma.powi(epoch as i32)
}

/// `apex + u`, `u` uniform on `{0..max_offset}`, clamped to the last frame.
pub fn sample_pseudo_apex(
    apex: usize,
    len: usize,
    max_offset: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize, TrainError> {
    if apex >= len {
        return Err(TrainError::InvalidApex { apex, len });
    }
    let u = rng.random_range(0..=max_offset);
    Ok((apex + u).min(len - 1))
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        Self {
            m: params.iter().map(|(k, t)| (k.to_string(), zeros(t))).collect(),
            v: params.iter().map(|(k, t)| (k.to_string(), zeros(t))).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.eps));
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) if m.len() == g.len() && v.len() == g.len() && p.len() == g.len() => (m, v),
            _ => return Err(TrainError::InvalidConfig(format!("optimizer state does not match {name}"))),
        };
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Network inputs of one sample, cached once per corpus.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    pub database_id: String,
    pub labels: [u8; 12],
    pub apex_index: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    /// `(3, H, W)` flow image of onset to apex.
    pub flow: Vec<f32>,
    /// Magnified input `Mag(onset, frame)` for frames `apex..=apex + max_offset`
    /// (clamped), each `(C/2, H, W)`.
    pub mags: Vec<Vec<f32>>,
    pub mag_channels: usize,
}

fn planes_to_vec(planes: impl Iterator<Item = Plane<f64>>, center: bool) -> Vec<f32> {
    planes
        .flat_map(|p| normalize_channel(p.data, center).into_iter().map(|v| v as f32))
        .collect()
}

/// Per-channel input scaling: unit RMS (after removing the mean when
/// `center`); an all-constant channel is left at zero or untouched.
pub fn normalize_channel(mut data: Vec<f64>, center: bool) -> Vec<f64> {
    let n = data.len().max(1) as f64;
    if center {
        let mean = data.iter().sum::<f64>() / n;
        data.iter_mut().for_each(|v| *v -= mean);
    }
    let rms = (data.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if rms > 1e-12 {
        data.iter_mut().for_each(|v| *v /= rms);
    }
    data
}

/// Flow image of a record, read from `cache` when present, otherwise computed
/// (and written to `cache` if given).
pub fn flow_input(
    manifest: &Manifest,
    rec: &SampleRecord,
    params: &FlowParams,
    cache: Option<&Path>,
) -> Result<OpticalFlowImage<f64>, TrainError> {
    if let Some(dir) = cache {
        let path = dir.join(format!("{}.ifnt", rec.sample_id));
        if path.exists() {
            let t = load_tensor(&path)?;
            return Ok(OpticalFlowImage::from_tensor(&t)?);
        }
    }
    let onset: Image<f64> = load_frame(manifest.onset_path(rec))?;
    let apex: Image<f64> = load_frame(manifest.apex_path(rec))?;
    let img = optical_flow_image(&onset, &apex, params)?;
    if let Some(dir) = cache {
        fs::create_dir_all(dir).map_err(|e| TrainError::Sample {
            id: rec.sample_id.clone(),
            msg: format!("{}: {e}", dir.display()),
        })?;
        store_tensor(&img.to_tensor(), dir.join(format!("{}.ifnt", rec.sample_id)))?;
    }
    Ok(img)
}

/// Loads frames, computes (or reads) the flow image and the magnified
/// inputs for every admissible pseudo-apex.
pub fn prepare_sample(
    manifest: &Manifest,
    rec: &SampleRecord,
    flow: &FlowParams,
    mag: &MagConfig,
    max_offset: usize,
    flow_cache: Option<&Path>,
) -> Result<PreparedSample, TrainError> {
    mag.validate()?;
    if rec.apex_index >= rec.num_frames {
        return Err(TrainError::InvalidApex {
            apex: rec.apex_index,
            len: rec.num_frames,
        });
    }
    let fimg = flow_input(manifest, rec, flow, flow_cache)?;
    let onset: Image<f64> = load_frame(manifest.onset_path(rec))?;
    onset.check_frame_dims()?;
    let (h, w) = onset.dims();
    let lo = encode(onset.plane(), mag.depth)?;
    let last = (rec.apex_index + max_offset).min(rec.num_frames - 1);
    let mut mags = Vec::new();
    for t in rec.apex_index..=last {
        let frame: Image<f64> = load_frame(manifest.frame_path(rec, t))?;
        if frame.dims() != (h, w) {
            return Err(TrainError::Magnify(MagnifyError::TripletMismatch));
        }
        let m = magnify_pair(&lo, &frame, mag)?;
        let v = if mag.decoded {
            planes_to_vec(std::iter::once(decode(&m)?.into_plane()), true)
        } else {
            planes_to_vec(m.levels().map(|l| resize_bilinear(l, h, w)), true)
        };
        mags.push(v);
    }
    // flow keeps zero as "no motion": scaled, never centred
    let flow_in = planes_to_vec(fimg.channels.into_iter(), false);
    Ok(PreparedSample {
        sample_id: rec.sample_id.clone(),
        database_id: rec.database_id.clone(),
        labels: rec.au_labels,
        apex_index: rec.apex_index,
        num_frames: rec.num_frames,
        height: h,
        width: w,
        flow: flow_in,
        mags,
        mag_channels: mag.input_channels(),
    })
}

/// Prepares every manifest record.
pub fn prepare_dataset(
    manifest: &Manifest,
    flow: &FlowParams,
    mag: &MagConfig,
    max_offset: usize,
    flow_cache: Option<&Path>,
) -> Result<Vec<PreparedSample>, TrainError> {
    manifest
        .samples
        .iter()
        .map(|rec| {
            prepare_sample(manifest, rec, flow, mag, max_offset, flow_cache).map_err(|e| match e {
                TrainError::Sample { .. } => e,
                other => TrainError::Sample {
                    id: rec.sample_id.clone(),
                    msg: other.to_string(),
                },
            })
        })
        .collect()
}

/// Batched network inputs and labels for `(sample, pseudo_apex)` pairs.
pub fn batch_inputs<T: Scalar>(
    items: &[(&PreparedSample, usize)],
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>), TrainError> {
    let first = items.first().ok_or(TrainError::EmptySplit)?.0;
    let (h, w, c) = (first.height, first.width, first.mag_channels);
    let mut flow = Vec::with_capacity(items.len() * 3 * h * w);
    let mut mag = Vec::with_capacity(items.len() * c * h * w);
    let mut labels = Vec::with_capacity(items.len() * NUM_AUS);
    for &(s, pa) in items {
        if (s.height, s.width, s.mag_channels) != (h, w, c) {
            return Err(TrainError::Sample {
                id: s.sample_id.clone(),
                msg: "inconsistent input geometry within a batch".into(),
            });
        }
        if pa < s.apex_index || pa - s.apex_index >= s.mags.len() {
            return Err(TrainError::InvalidApex {
                apex: pa,
                len: s.num_frames,
            });
        }
        flow.extend(s.flow.iter().map(|&v| T::lit(v as f64)));
        for part in [&s.mags[0], &s.mags[pa - s.apex_index]] {
            mag.extend(part.iter().map(|&v| T::lit(v as f64)));
        }
        labels.extend(s.labels.iter().map(|&v| T::lit(v as f64)));
    }
    let n = items.len();
    Ok((
        Tensor::new(vec![n, 3, h, w], flow)?,
        Tensor::new(vec![n, c, h, w], mag)?,
        labels,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub curve: Vec<LossPoint>,
    /// Squared gradient norm per stream prefix, summed over training.
    pub grad_energy: BTreeMap<String, f64>,
}

pub fn curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.epoch, p.step, p.loss));
    }
    s
}

/// Trains from a seeded initialisation. Each epoch shuffles the split,
/// draws a pseudo-apex per sample, and takes one Adam step per batch.
pub fn train_model<T: Scalar>(
    data: &[&PreparedSample],
    model: &BackboneConfig,
    cfg: &TrainConfig,
    mode: MaskMode,
    seed: u64,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let model = BackboneConfig {
        aux_flow_head: cfg.aux_flow_head,
        ..model.clone()
    };
    let mut params = model.init_params::<T>(seed);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "train"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    let mut grad_energy: BTreeMap<String, f64> = BTreeMap::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.lr, cfg.gamma, epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = data[i];
                let pa = sample_pseudo_apex(s.apex_index, s.num_frames, cfg.max_offset, &mut rng)?;
                // prepared inputs cover only the offsets cached at preparation
                let pa = pa.min(s.apex_index + s.mags.len() - 1);
                items.push((s, pa));
            }
            let (flow, mag, labels) = batch_inputs::<T>(&items)?;
            let mut g = Graph::new();
            let pv = place_params(&mut g, &params, true)?;
            let fv = g.input(flow)?;
            let mv = g.input(mag)?;
            let fwd = build_forward(&mut g, &model, &pv, Some(fv), Some(mv), mode)?;
            let loss = match cfg.loss {
                LossKind::Bce => g.bce_multilabel_loss(fwd.logits, &labels)?,
                LossKind::SoftmaxCe => g.softmax_ce_loss(fwd.logits, &labels)?,
            };
            let total = match fwd.aux_logits {
                Some(aux) => {
                    let la = match cfg.loss {
                        LossKind::Bce => g.bce_multilabel_loss(aux, &labels)?,
                        LossKind::SoftmaxCe => g.softmax_ce_loss(aux, &labels)?,
                    };
                    g.add(loss, la)?
                }
                None => loss,
            };
            let lv = g.value(total).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            g.backward(total)?;
            let grads: BTreeMap<String, Vec<T>> =
                pv.iter().map(|(k, &v)| (k.clone(), g.grad_or_zeros(v))).collect();
            for (k, gv) in &grads {
                let prefix = k.split('/').next().unwrap_or(k).to_string();
                *grad_energy.entry(prefix).or_default() +=
                    gv.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
            adam_step(&mut params, &grads, &mut state, lr)?;
            curve.push(LossPoint {
                epoch,
                step,
                loss: lv,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        curve,
        grad_energy,
    })
}

/// Logits `(N, 12)` at the annotated apex.
pub fn predict_logits<T: Scalar>(
    data: &[&PreparedSample],
    model: &BackboneConfig,
    params: &ParamStore<T>,
    mode: MaskMode,
    batch: usize,
) -> Result<Vec<[f64; NUM_AUS]>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch.max(1)) {
        let items: Vec<_> = chunk.iter().map(|&s| (s, s.apex_index)).collect();
        let (flow, mag, _) = batch_inputs::<T>(&items)?;
        let mut g = Graph::new();
        let pv = place_params(&mut g, params, false)?;
        let fv = g.input(flow)?;
        let mv = g.input(mag)?;
        let fwd = build_forward(&mut g, model, &pv, Some(fv), Some(mv), mode)?;
        for row in g.value(fwd.logits).data().chunks(NUM_AUS) {
            let mut r = [0.0; NUM_AUS];
            for (o, v) in r.iter_mut().zip(row) {
                *o = v.as_f64();
            }
            out.push(r);
        }
    }
    Ok(out)
}

/// Thresholded predictions: `sigmoid(z) >= 0.5` for BCE, argmax for softmax.
pub fn decide(logits: &[f64; NUM_AUS], loss: LossKind) -> [u8; NUM_AUS] {
    let mut p = [0u8; NUM_AUS];
    match loss {
        LossKind::Bce => {
            for (o, &z) in p.iter_mut().zip(logits) {
                *o = u8::from(z >= 0.0);
            }
        }
        LossKind::SoftmaxCe => {
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            p[best] = 1;
        }
    }
    p
}
