//! Synthetic micro-motion corpus.
//!
//! A face proxy is a smooth background plus 12 oriented blob patches on a
//! 4 x 3 grid (rows: brows, eyes, nose, mouth), one per AU. An active AU
//! translates its region rigidly along a ramp that peaks at the apex frame.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::FlowField;
use crate::imaging::{store_frame, Image, ImagingError, Plane};

/// AU names in label order.
pub const AU_NAMES: [&str; 12] = [
    "AU1", "AU2", "AU4", "AU5", "AU6", "AU7", "AU9", "AU10", "AU12", "AU14", "AU15", "AU17",
];

/// Class-distribution percentages used when sampling primary AUs.
pub const AU_PERCENT: [f64; 12] = [12., 11., 28., 5., 2., 10., 5., 3., 7., 11., 2., 3.];

const MAX_DISPLACEMENT: f64 = 2.0;
const MIN_SIDE: usize = 32;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid sequence spec: {0}")]
    InvalidSpec(String),
    #[error("region {region} displaced by ({dy:.3}, {dx:.3}) leaves the frame")]
    OutOfBounds { region: usize, dy: f64, dx: f64 },
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("cannot write corpus: {0}")]
    Io(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub illumination_drift: f64,
    pub artefact_level: f64,
    pub sensor_sigma: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("illumination_drift", self.illumination_drift),
            ("artefact_level", self.artefact_level),
            ("sensor_sigma", self.sensor_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SynthError::InvalidSpec(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    fn is_zero(&self) -> bool {
        self.illumination_drift == 0.0 && self.artefact_level == 0.0 && self.sensor_sigma == 0.0
    }
}

/// Appearance of the face proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    /// Peak amplitude of the region patches.
    pub contrast: f64,
    /// Amplitude of the smooth background variation.
    pub background: f64,
    /// Patch carrier wavelength in pixels.
    pub wavelength: f64,
    pub seed: u64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            contrast: 0.3,
            background: 0.08,
            wavelength: 6.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub apex_index: usize,
    pub au_labels: [u8; 12],
    pub displacement_px: f64,
    pub noise: NoiseSpec,
    pub texture: TextureSpec,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(SynthError::InvalidSpec(format!(
                "frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_frames < 3 {
            return Err(SynthError::InvalidSpec("num_frames must be >= 3".into()));
        }
        if self.apex_index == 0 || self.apex_index >= self.num_frames {
            return Err(SynthError::InvalidSpec(format!(
                "apex index {} outside [1, {})",
                self.apex_index, self.num_frames
            )));
        }
        if !(self.displacement_px > 0.0 && self.displacement_px <= MAX_DISPLACEMENT) {
            return Err(SynthError::InvalidSpec(format!(
                "displacement {} outside (0, {MAX_DISPLACEMENT}]",
                self.displacement_px
            )));
        }
        if self.au_labels.iter().any(|&v| v > 1) {
            return Err(SynthError::InvalidSpec("labels must be 0/1".into()));
        }
        self.noise.validate()
    }
}

/// Rectangular support of one AU region, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.y0 + self.y1) as f64 / 2.0,
            (self.x0 + self.x1) as f64 / 2.0,
        )
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }
}

/// Region supports for a frame size, in AU order.
pub fn region_layout(height: usize, width: usize) -> Vec<Region> {
    let ch = height as f64 / 4.0;
    let cw = width as f64 / 3.0;
    let hh = (ch * 0.32).floor() as usize;
    let hw = (cw * 0.34).floor() as usize;
    (0..12)
        .map(|k| {
            let cy = ((k / 3) as f64 + 0.5) * ch;
            let cx = ((k % 3) as f64 + 0.5) * cw;
            let (cy, cx) = (cy.floor() as usize, cx.floor() as usize);
            Region {
                y0: cy - hh,
                y1: cy + hh - 1,
                x0: cx - hw,
                x1: cx + hw - 1,
            }
        })
        .collect()
}

/// Unit motion direction `(dy, dx)` of an AU region.
pub fn au_direction(k: usize) -> (f64, f64) {
    let a = (k as f64) * std::f64::consts::PI / 6.0;
    (a.sin(), a.cos())
}

/// Fraction of the apex displacement reached at frame `t`: linear onset
/// ramp, then a partial linear release.
pub fn motion_profile(t: usize, apex: usize, num_frames: usize) -> f64 {
    if t <= apex {
        t as f64 / apex as f64
    } else {
        let tail = (num_frames - 1 - apex).max(1) as f64;
        1.0 - 0.5 * (t - apex) as f64 / tail
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable sub-seed of `(seed, tag)`.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Static face proxy for a texture.
pub fn base_face(height: usize, width: usize, tex: &TextureSpec) -> Plane<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(tex.seed);
    let regions = region_layout(height, width);
    // low-frequency background from a few broad bumps
    let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(0.25..0.5) * height.min(width) as f64,
                rng.random_range(-1.0..1.0) * tex.background,
            )
        })
        .collect();
    let phase: Vec<f64> = (0..12)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let gain: Vec<f64> = (0..12).map(|_| rng.random_range(0.8..1.2)).collect();
    let k = std::f64::consts::TAU / tex.wavelength;
    Plane::from_fn(height, width, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = 0.5;
        for &(by, bx, s, a) in &bumps {
            v += a * (-((yf - by).powi(2) + (xf - bx).powi(2)) / (2.0 * s * s)).exp();
        }
        for (r, reg) in regions.iter().enumerate() {
            let (cy, cx) = reg.center();
            let sy = (reg.y1 - reg.y0 + 1) as f64 / 4.0;
            let sx = (reg.x1 - reg.x0 + 1) as f64 / 4.0;
            let e = (-(yf - cy).powi(2) / (2.0 * sy * sy) - (xf - cx).powi(2) / (2.0 * sx * sx)).exp();
            if e < 1e-6 {
                continue;
            }
            // crossed carriers at a per-region orientation, so motion in any
            // direction is visible to a brightness-constancy estimator
            let th = r as f64 * std::f64::consts::PI / 12.0;
            let u = (yf - cy) * th.sin() + (xf - cx) * th.cos();
            let w = (yf - cy) * th.cos() - (xf - cx) * th.sin();
            let carrier = 0.5 * ((k * u + phase[r]).cos() + (k * w - phase[r]).cos());
            v += tex.contrast * gain[r] * e * carrier;
        }
        v.clamp(0.0, 1.0)
    })
}

/// Adds per-frame illumination drift, speckle patches and sensor noise,
/// clamping to `[0, 1]`.
pub fn inject_artefacts(img: &Image<f64>, noise: &NoiseSpec, seed: u64) -> Image<f64> {
    if noise.is_zero() {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = img.dims();
    let mut p = img.plane().clone();
    if noise.illumination_drift > 0.0 {
        let a = rng.random_range(-1.0..1.0) * noise.illumination_drift;
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        let (gy, gx) = (th.sin(), th.cos());
        for y in 0..h {
            for x in 0..w {
                let u = gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
                *p.at_mut(y, x) += a * u;
            }
        }
    }
    if noise.artefact_level > 0.0 {
        let count = (h * w).div_ceil(512);
        for _ in 0..count {
            let size = rng.random_range(2..=3usize);
            let y0 = rng.random_range(0..=h - size);
            let x0 = rng.random_range(0..=w - size);
            let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                * noise.artefact_level
                * rng.random_range(0.5..1.0);
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    *p.at_mut(y, x) += amp;
                }
            }
        }
    }
    if noise.sensor_sigma > 0.0 {
        let n = Normal::new(0.0, noise.sensor_sigma).expect("sigma validated");
        for v in &mut p.data {
            *v += n.sample(&mut rng);
        }
    }
    Image::from_plane_clamped(p)
}

/// Renders every frame of a sequence and the ground-truth flow at the apex.
pub fn gen_sequence(spec: &SequenceSpec) -> Result<(Vec<Image<f64>>, FlowField<f64>), SynthError> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let base = base_face(h, w, &spec.texture);
    let regions = region_layout(h, w);
    let active: Vec<usize> = (0..12).filter(|&k| spec.au_labels[k] == 1).collect();
    for &k in &active {
        let (uy, ux) = au_direction(k);
        let (dy, dx) = (uy * spec.displacement_px, ux * spec.displacement_px);
        let r = regions[k];
        let fits = r.y0 as f64 + dy.min(0.0) >= 0.0
            && r.x0 as f64 + dx.min(0.0) >= 0.0
            && r.y1 as f64 + dy.max(0.0) <= (h - 1) as f64
            && r.x1 as f64 + dx.max(0.0) <= (w - 1) as f64;
        if !fits {
            return Err(SynthError::OutOfBounds { region: k, dy, dx });
        }
    }
    let mut frames = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let s = motion_profile(t, spec.apex_index, spec.num_frames) * spec.displacement_px;
        let mut p = base.clone();
        for &k in &active {
            let (uy, ux) = au_direction(k);
            let r = regions[k];
            for y in r.y0..=r.y1 {
                for x in r.x0..=r.x1 {
                    *p.at_mut(y, x) = base.sample_bilinear(y as f64 - uy * s, x as f64 - ux * s);
                }
            }
        }
        let clean = Image::from_plane_clamped(p);
        let seed = sub_seed(spec.seed, &format!("frame{t}"));
        frames.push(inject_artefacts(&clean, &spec.noise, seed));
    }
    let gt = FlowField::from_fn(h, w, |y, x| {
        for &k in &active {
            if regions[k].contains(y, x) {
                let (uy, ux) = au_direction(k);
                return (ux * spec.displacement_px, uy * spec.displacement_px);
            }
        }
        (0.0, 0.0)
    });
    Ok((frames, gt))
}

/// One pseudo-database of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseSpec {
    pub name: String,
    pub samples: usize,
    pub displacement_px: f64,
    pub noise: NoiseSpec,
    pub contrast: f64,
    pub wavelength: f64,
}

/// The `corpus` section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    /// Sample primary AUs from the class-distribution percentages instead
    /// of uniformly.
    pub class_distribution: bool,
    /// Probability that a paired AU co-occurs with the primary one.
    pub cooccurrence: f64,
    pub databases: Vec<DatabaseSpec>,
}

fn default_databases() -> Vec<DatabaseSpec> {
    // artefact-heavy defaults with per-database shifts in appearance,
    // motion amplitude and noise
    let rows: [(f64, f64, f64, f64, f64, f64); 6] = [
        (1.30, 0.03, 0.10, 0.010, 0.40, 7.0),
        (1.10, 0.05, 0.12, 0.012, 0.35, 6.5),
        (1.50, 0.02, 0.08, 0.008, 0.45, 7.5),
        (1.00, 0.04, 0.15, 0.012, 0.38, 7.0),
        (1.20, 0.06, 0.10, 0.015, 0.42, 6.0),
        (1.40, 0.03, 0.12, 0.010, 0.40, 8.0),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(d, ill, art, sen, con, wl))| DatabaseSpec {
            name: format!("pseudo_{}", i + 1),
            samples: 40,
            displacement_px: d,
            noise: NoiseSpec {
                illumination_drift: ill,
                artefact_level: art,
                sensor_sigma: sen,
            },
            contrast: con,
            wavelength: wl,
        })
        .collect()
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_frames: 12,
            class_distribution: true,
            cooccurrence: 0.3,
            databases: default_databases(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(SynthError::InvalidConfig(format!(
                "frames must be at least {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if self.num_frames < 4 {
            return Err(SynthError::InvalidConfig("num_frames must be >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.cooccurrence) {
            return Err(SynthError::InvalidConfig("cooccurrence outside [0, 1]".into()));
        }
        if self.databases.is_empty() {
            return Err(SynthError::InvalidConfig("no databases".into()));
        }
        let mut names: Vec<&str> = self.databases.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.databases.len() {
            return Err(SynthError::InvalidConfig("duplicate database names".into()));
        }
        for d in &self.databases {
            if d.name.is_empty() || d.name.contains(['/', '\\']) {
                return Err(SynthError::InvalidConfig(format!("bad database name {:?}", d.name)));
            }
            if d.samples == 0 {
                return Err(SynthError::InvalidConfig(format!("{}: zero samples", d.name)));
            }
            if !(d.displacement_px > 0.0 && d.displacement_px * 1.2 <= MAX_DISPLACEMENT) {
                return Err(SynthError::InvalidConfig(format!(
                    "{}: displacement {} (jittered up to 1.2x) must stay within (0, {MAX_DISPLACEMENT}]",
                    d.name, d.displacement_px
                )));
            }
            if !(d.contrast >= 0.0 && d.wavelength >= 2.0) {
                return Err(SynthError::InvalidConfig(format!("{}: bad texture", d.name)));
            }
            d.noise.validate()?;
        }
        Ok(())
    }
}

/// One manifest entry; paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub database_id: String,
    pub onset_path: String,
    pub apex_path: String,
    pub apex_index: usize,
    pub num_frames: usize,
    pub au_labels: [u8; 12],
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:03}.pgm")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| SynthError::Manifest(format!("{}: {e}", path.display())))?;
        let samples: Vec<SampleRecord> = serde_json::from_str(&text)
            .map_err(|e| SynthError::Manifest(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { root, samples };
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.samples).expect("records serialise")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.sample_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.samples.len() {
            return Err(SynthError::Manifest("duplicate sample ids".into()));
        }
        for s in &self.samples {
            if s.apex_index >= s.num_frames || s.au_labels.iter().any(|&v| v > 1) {
                return Err(SynthError::Manifest(format!("{}: inconsistent record", s.sample_id)));
            }
        }
        Ok(())
    }

    pub fn database_ids(&self) -> Vec<String> {
        let mut v: Vec<String> = self.samples.iter().map(|s| s.database_id.clone()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Path of frame `t` of a sample; frames sit next to the onset frame.
    pub fn frame_path(&self, s: &SampleRecord, t: usize) -> PathBuf {
        let onset = self.root.join(&s.onset_path);
        onset
            .parent()
            .map(|d| d.join(frame_name(t)))
            .unwrap_or_else(|| PathBuf::from(frame_name(t)))
    }

    pub fn onset_path(&self, s: &SampleRecord) -> PathBuf {
        self.root.join(&s.onset_path)
    }

    pub fn apex_path(&self, s: &SampleRecord) -> PathBuf {
        self.root.join(&s.apex_path)
    }
}

const PAIRS: [(usize, usize); 4] = [(0, 1), (1, 0), (4, 8), (8, 4)];

fn draw_labels(rng: &mut ChaCha8Rng, cfg: &CorpusConfig) -> [u8; 12] {
    let weights: [f64; 12] = if cfg.class_distribution {
        AU_PERCENT
    } else {
        [1.0; 12]
    };
    let dist = WeightedIndex::new(weights).expect("positive weights");
    let primary = dist.sample(rng);
    let mut labels = [0u8; 12];
    labels[primary] = 1;
    let roll: f64 = rng.random();
    if let Some(&(_, partner)) = PAIRS.iter().find(|&&(a, _)| a == primary) {
        if roll < cfg.cooccurrence {
            labels[partner] = 1;
        }
    }
    labels
}

/// Sequence spec of sample `index` of database `db`.
pub fn sample_spec(cfg: &CorpusConfig, db: &DatabaseSpec, index: usize, seed: u64) -> (String, SequenceSpec) {
    let id = format!("{}_{index:03}", db.name);
    let s = sub_seed(seed, &id);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let au_labels = draw_labels(&mut rng, cfg);
    let hi = (cfg.num_frames / 2).max(1);
    let lo = (cfg.num_frames / 4).max(1).min(hi);
    let apex_index = rng.random_range(lo..=hi);
    let displacement_px = db.displacement_px * rng.random_range(0.8..1.2);
    let texture = TextureSpec {
        contrast: db.contrast,
        background: 0.08,
        wavelength: db.wavelength,
        seed: sub_seed(s, "texture"),
    };
    let spec = SequenceSpec {
        height: cfg.height,
        width: cfg.width,
        num_frames: cfg.num_frames,
        apex_index,
        au_labels,
        displacement_px,
        noise: db.noise,
        texture,
        seed: sub_seed(s, "noise"),
    };
    (id, spec)
}

/// Writes every sequence under `out/<sample_id>/` and `out/manifest.json`.
pub fn gen_corpus(cfg: &CorpusConfig, seed: u64, out: impl AsRef<Path>) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| SynthError::Io(format!("{}: {e}", out.display())))?;
    let mut samples = Vec::new();
    for db in &cfg.databases {
        for i in 0..db.samples {
            let (id, spec) = sample_spec(cfg, db, i, seed);
            let (frames, _) = gen_sequence(&spec)?;
            let dir = out.join(&id);
            fs::create_dir_all(&dir).map_err(|e| SynthError::Io(format!("{}: {e}", dir.display())))?;
            for (t, f) in frames.iter().enumerate() {
                store_frame(f, dir.join(frame_name(t)))?;
            }
            samples.push(SampleRecord {
                onset_path: format!("{id}/{}", frame_name(0)),
                apex_path: format!("{id}/{}", frame_name(spec.apex_index)),
                sample_id: id,
                database_id: db.name.clone(),
                apex_index: spec.apex_index,
                num_frames: spec.num_frames,
                au_labels: spec.au_labels,
            });
        }
    }
    let m = Manifest {
        root: out.to_path_buf(),
        samples,
    };
    fs::write(out.join(MANIFEST_FILE), m.to_json())
        .map_err(|e| SynthError::Io(format!("{}: {e}", out.display())))?;
    Ok(m)
}

pub fn manifest_path(corpus_dir: impl AsRef<Path>) -> PathBuf {
    corpus_dir.as_ref().join(MANIFEST_FILE)
}
