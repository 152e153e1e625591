//! Two-stream AU detector: a FrameFlow backbone produces per-block soft masks
//! that are multiplied into the matching FrameMag block outputs.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonet::{glorot_uniform, Graph, NetError, ParamStore, Tensor, Var};
use crate::magnify::resize_bilinear;
use crate::imaging::Plane;
use crate::scalar::Scalar;

pub const NUM_AUS: usize = 12;
pub const FLOW_CHANNELS: usize = 3;
const KERNEL: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("stream geometry diverges: {0}")]
    Geometry(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("class index {0} outside [0, {NUM_AUS})")]
    InvalidClass(usize),
    #[error("mask value {0} outside [0, 1]")]
    MaskRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Infuse,
    Late,
    SingleFlow,
    SingleMag,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Infuse => "infuse",
            Fusion::Late => "late",
            Fusion::SingleFlow => "single_flow",
            Fusion::SingleMag => "single_mag",
        }
    }

    fn uses_flow(self) -> bool {
        self != Fusion::SingleMag
    }

    fn uses_mag(self) -> bool {
        self != Fusion::SingleFlow
    }
}

/// The `model` section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub widths: Vec<usize>,
    /// With `fusion = infuse`, `false` replaces every mask by ones.
    pub infusion: bool,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            widths: vec![16, 32, 64],
            infusion: true,
            fusion: Fusion::Infuse,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.blocks == 0 {
            return Err(ModelError::InvalidConfig("blocks must be >= 1".into()));
        }
        if self.widths.len() != self.blocks {
            return Err(ModelError::InvalidConfig(format!(
                "{} widths for {} blocks",
                self.widths.len(),
                self.blocks
            )));
        }
        if self.widths.contains(&0) {
            return Err(ModelError::InvalidConfig("zero block width".into()));
        }
        Ok(())
    }

    pub fn mask_mode(&self) -> MaskMode {
        if self.infusion {
            MaskMode::Flow
        } else {
            MaskMode::Ones
        }
    }
}

/// Geometry of both backbones.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub flow_in: usize,
    pub mag_in: usize,
    pub fusion: Fusion,
    pub aux_flow_head: bool,
}

impl BackboneConfig {
    pub fn new(model: &ModelConfig, mag_in: usize) -> Result<Self, ModelError> {
        model.validate()?;
        Ok(Self {
            widths: model.widths.clone(),
            flow_in: FLOW_CHANNELS,
            mag_in,
            fusion: model.fusion,
            aux_flow_head: false,
        })
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    fn head_in(&self) -> usize {
        let last = *self.widths.last().expect("validated");
        match self.fusion {
            Fusion::Late => 2 * last,
            _ => last,
        }
    }

    /// Seeded Glorot initialisation; convolutions are bias-free, the heads
    /// start with zero bias.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let add_stream = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, cin: usize| {
            let mut c = cin;
            for (i, &w) in self.widths.iter().enumerate() {
                let k2 = KERNEL * KERNEL;
                store.insert(
                    format!("{prefix}/conv{i}/w"),
                    glorot_uniform(&[w, c, KERNEL, KERNEL], c * k2, w * k2, rng),
                );
                c = w;
            }
        };
        if self.fusion.uses_flow() {
            add_stream(&mut store, &mut rng, "flow", self.flow_in);
        }
        if self.fusion.uses_mag() {
            add_stream(&mut store, &mut rng, "mag", self.mag_in);
        }
        let fin = self.head_in();
        store.insert("head/w", glorot_uniform(&[NUM_AUS, fin], fin, NUM_AUS, &mut rng));
        store.insert("head/b", Tensor::zeros(&[NUM_AUS]));
        if self.aux_flow_head && self.fusion == Fusion::Infuse {
            let fin = *self.widths.last().expect("validated");
            store.insert("aux/w", glorot_uniform(&[NUM_AUS, fin], fin, NUM_AUS, &mut rng));
            store.insert("aux/b", Tensor::zeros(&[NUM_AUS]));
        }
        store
    }
}

/// Source of the per-block masks in the infused forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Flow,
    Ones,
}

/// Per-block handles of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct StreamState {
    pub flow_features: Vec<Var>,
    pub mag_features: Vec<Var>,
    pub masks: Vec<Var>,
    pub infused: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub aux_logits: Option<Var>,
    pub state: StreamState,
    /// Feature map explained by saliency.
    pub explained: Var,
}

/// Places every tensor of `store` on `g`, trainable or constant.
pub fn place_params<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    trainable: bool,
) -> Result<BTreeMap<String, Var>, NetError> {
    store
        .iter()
        .map(|(name, t)| {
            let v = if trainable {
                g.param(t.clone())?
            } else {
                g.input(t.clone())?
            };
            Ok((name.to_string(), v))
        })
        .collect()
}

fn get(p: &BTreeMap<String, Var>, name: &str) -> Result<Var, ModelError> {
    p.get(name)
        .copied()
        .ok_or_else(|| ModelError::Net(NetError::Checkpoint(format!("missing parameter {name}"))))
}

fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: &BTreeMap<String, Var>,
    prefix: &str,
    i: usize,
    x: Var,
) -> Result<Var, ModelError> {
    let w = get(p, &format!("{prefix}/conv{i}/w"))?;
    let c = g.conv2d(x, w, None)?;
    Ok(g.relu_pool(c)?)
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, channels: usize, blocks: usize, what: &str) -> Result<(usize, usize, usize), ModelError> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if c != channels {
        return Err(ModelError::Geometry(format!(
            "{what} input has {c} channels, backbone expects {channels}"
        )));
    }
    let m = 1usize << blocks;
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(ModelError::Geometry(format!(
            "{what} input {h}x{w} not divisible by {m} for {blocks} blocks"
        )));
    }
    Ok((n, h, w))
}

fn head<T: Scalar>(g: &mut Graph<T>, p: &BTreeMap<String, Var>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = get(p, &format!("{prefix}/w"))?;
    let b = get(p, &format!("{prefix}/b"))?;
    Ok(g.linear(x, w, Some(b))?)
}

fn check_mask<T: Scalar>(g: &Graph<T>, a: Var) -> Result<(), ModelError> {
    if let Some(v) = g
        .value(a)
        .data()
        .iter()
        .find(|&&v| v < T::zero() || v > T::one())
    {
        return Err(ModelError::MaskRange(v.as_f64()));
    }
    Ok(())
}

/// Builds the forward graph of the configured variant. `flow` is
/// `(N, 3, H, W)`, `mag` is `(N, mag_in, H, W)`; either may be absent when the
/// variant does not read it.
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    p: &BTreeMap<String, Var>,
    flow: Option<Var>,
    mag: Option<Var>,
    mode: MaskMode,
) -> Result<Forward, ModelError> {
    let b = cfg.blocks();
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| ModelError::Geometry(format!("{what} input missing")))
    };
    let mut state = StreamState::default();
    match cfg.fusion {
        Fusion::Infuse => {
            let (fx, mx) = (need(flow, "flow")?, need(mag, "mag")?);
            let (nf, hf, wf) = check_input(g, fx, cfg.flow_in, b, "flow")?;
            let (nm, hm, wm) = check_input(g, mx, cfg.mag_in, b, "mag")?;
            if (nf, hf, wf) != (nm, hm, wm) {
                return Err(ModelError::Geometry(format!(
                    "flow {nf}x{hf}x{wf} vs mag {nm}x{hm}x{wm}"
                )));
            }
            let (mut prev_of, mut prev_mag) = (fx, mx);
            for i in 0..b {
                let f_of = block(g, p, "flow", i, prev_of)?;
                let f_feat = block(g, p, "mag", i, prev_mag)?;
                if g.value(f_of).shape() != g.value(f_feat).shape() {
                    return Err(ModelError::Geometry(format!(
                        "block {i}: {:?} vs {:?}",
                        g.value(f_of).shape(),
                        g.value(f_feat).shape()
                    )));
                }
                let a = match mode {
                    MaskMode::Flow => g.minmax_normalize(f_of)?,
                    MaskMode::Ones => {
                        let shape = g.value(f_feat).shape().to_vec();
                        g.input(Tensor::filled(&shape, T::one()))?
                    }
                };
                check_mask(g, a)?;
                let f_inf = g.mul(f_feat, a)?;
                state.flow_features.push(f_of);
                state.mag_features.push(f_feat);
                state.masks.push(a);
                state.infused.push(f_inf);
                prev_of = f_of;
                prev_mag = f_inf;
            }
            let pooled = g.global_avg_pool(prev_mag)?;
            let logits = head(g, p, "head", pooled)?;
            let aux_logits = if cfg.aux_flow_head {
                let pf = g.global_avg_pool(prev_of)?;
                Some(head(g, p, "aux", pf)?)
            } else {
                None
            };
            Ok(Forward {
                logits,
                aux_logits,
                state,
                explained: prev_mag,
            })
        }
        Fusion::Late => {
            let (fx, mx) = (need(flow, "flow")?, need(mag, "mag")?);
            let gf = check_input(g, fx, cfg.flow_in, b, "flow")?;
            let gm = check_input(g, mx, cfg.mag_in, b, "mag")?;
            if gf != gm {
                return Err(ModelError::Geometry(format!("flow {gf:?} vs mag {gm:?}")));
            }
            let (mut f, mut m) = (fx, mx);
            for i in 0..b {
                f = block(g, p, "flow", i, f)?;
                m = block(g, p, "mag", i, m)?;
                state.flow_features.push(f);
                state.mag_features.push(m);
            }
            let pf = g.global_avg_pool(f)?;
            let pm = g.global_avg_pool(m)?;
            let joint = g.concat(pf, pm)?;
            let logits = head(g, p, "head", joint)?;
            Ok(Forward {
                logits,
                aux_logits: None,
                state,
                explained: m,
            })
        }
        Fusion::SingleFlow | Fusion::SingleMag => {
            let (prefix, x, cin) = if cfg.fusion == Fusion::SingleFlow {
                ("flow", need(flow, "flow")?, cfg.flow_in)
            } else {
                ("mag", need(mag, "mag")?, cfg.mag_in)
            };
            check_input(g, x, cin, b, prefix)?;
            let mut f = x;
            for i in 0..b {
                f = block(g, p, prefix, i, f)?;
                if prefix == "flow" {
                    state.flow_features.push(f);
                } else {
                    state.mag_features.push(f);
                }
            }
            let pooled = g.global_avg_pool(f)?;
            let logits = head(g, p, "head", pooled)?;
            Ok(Forward {
                logits,
                aux_logits: None,
                state,
                explained: f,
            })
        }
    }
}

fn run<T: Scalar>(
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
    flow: Option<&Tensor<T>>,
    mag: Option<&Tensor<T>>,
    mode: MaskMode,
) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let p = place_params(&mut g, params, false)?;
    let fv = flow.map(|t| g.input(t.clone())).transpose()?;
    let mv = mag.map(|t| g.input(t.clone())).transpose()?;
    let fwd = build_forward(&mut g, cfg, &p, fv, mv, mode)?;
    Ok(g.value(fwd.logits).clone())
}

/// Infused two-stream forward; returns `(N, 12)` logits.
pub fn forward_infusenet<T: Scalar>(
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
    flow: &Tensor<T>,
    mag: &Tensor<T>,
    mode: MaskMode,
) -> Result<Tensor<T>, ModelError> {
    let cfg = BackboneConfig {
        fusion: Fusion::Infuse,
        ..cfg.clone()
    };
    run(&cfg, params, Some(flow), Some(mag), mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Flow,
    Mag,
}

/// One backbone alone, pooled, then the head.
pub fn forward_single<T: Scalar>(
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    which: Stream,
) -> Result<Tensor<T>, ModelError> {
    let (fusion, flow, mag) = match which {
        Stream::Flow => (Fusion::SingleFlow, Some(input), None),
        Stream::Mag => (Fusion::SingleMag, None, Some(input)),
    };
    let cfg = BackboneConfig {
        fusion,
        ..cfg.clone()
    };
    run(&cfg, params, flow, mag, MaskMode::Flow)
}

/// Both backbones independently, pooled features concatenated, one head.
pub fn late_fusion_forward<T: Scalar>(
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
    flow: &Tensor<T>,
    mag: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    let cfg = BackboneConfig {
        fusion: Fusion::Late,
        ..cfg.clone()
    };
    run(&cfg, params, Some(flow), Some(mag), MaskMode::Flow)
}

/// Forward of whatever variant `cfg` names.
pub fn predict<T: Scalar>(
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
    flow: &Tensor<T>,
    mag: &Tensor<T>,
    mode: MaskMode,
) -> Result<Tensor<T>, ModelError> {
    run(cfg, params, Some(flow), Some(mag), mode)
}

/// Class-activation map of a single sample: channel-averaged gradient of the
/// class logit times the last (infused) feature map, rectified, bilinearly
/// upsampled to the input size and scaled so its maximum is 1.
pub fn saliency_map<T: Scalar>(
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
    flow: &Tensor<T>,
    mag: &Tensor<T>,
    class: usize,
    mode: MaskMode,
) -> Result<Plane<T>, ModelError> {
    if class >= NUM_AUS {
        return Err(ModelError::InvalidClass(class));
    }
    let (n, _, h, w) = flow.dims4()?;
    if n != 1 {
        return Err(ModelError::Geometry(format!("saliency takes one sample, got {n}")));
    }
    let mut g = Graph::new();
    let p = place_params(&mut g, params, true)?;
    let fv = g.input(flow.clone())?;
    let mv = g.input(mag.clone())?;
    let fwd = build_forward(&mut g, cfg, &p, Some(fv), Some(mv), mode)?;
    let mut onehot = vec![T::zero(); NUM_AUS];
    onehot[class] = T::one();
    let score = g.weighted_sum(fwd.logits, onehot)?;
    g.backward(score)?;
    let (_, c, fh, fw) = g.value(fwd.explained).dims4()?;
    let act = g.value(fwd.explained).data();
    let grad = g.grad_or_zeros(fwd.explained);
    let hw = fh * fw;
    let mut cam: Plane<T> = Plane::zeros(fh, fw);
    for k in 0..c {
        let gk = &grad[k * hw..(k + 1) * hw];
        let alpha = gk.iter().copied().sum::<T>() / T::lit(hw as f64);
        for (o, &a) in cam.data.iter_mut().zip(&act[k * hw..(k + 1) * hw]) {
            *o += alpha * a;
        }
    }
    let cam = cam.map(|v| v.max(T::zero()));
    let mut up = resize_bilinear(&cam, h, w);
    let mx = up.data.iter().copied().fold(T::zero(), T::max);
    if mx > T::zero() {
        for v in &mut up.data {
            *v = (*v / mx).min(T::one()).max(T::zero());
        }
    } else {
        up.data.fill(T::zero());
    }
    Ok(up)
}
