//! Stage bodies. Every stage checks its prerequisites, writes its artifacts,
//! validates them, and records a timing entry in `bench.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use infuse_core::autonet::{NetError, ParamStore};
use infuse_core::config::{ConfigError, RunConfig};
use infuse_core::docsbench::{peak_memory_estimate, upsert_bench, BenchError, BenchRecord};
use infuse_core::eval::{
    ablation_csv, dataset_folds, fusion_variants, run_protocol, score_fold, train_fold, AblationRow, EvalError,
    Fold, ProtocolReport, Variant,
};
use infuse_core::flow::{optical_flow_image, FlowError, FlowParams, OpticalFlowImage};
use infuse_core::imaging::{load_frame, load_tensor, store_frame, store_tensor, Image, ImagingError};
use infuse_core::infusenet::{saliency_map, Fusion, ModelError};
use infuse_core::magnify::{decoded_magnified_pair, magnified_latent_pair, MagConfig, MagnifyError};
use infuse_core::synth::{gen_corpus, manifest_path, Manifest, SampleRecord, SynthError, AU_NAMES};
use infuse_core::train::{batch_inputs, curve_csv, prepare_dataset, prepare_sample, PreparedSample, TrainError};
use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use crate::Sweep;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("artifact failed validation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Magnify(#[from] MagnifyError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn corpus_dir(out: &Path) -> PathBuf {
    out.join("corpus")
}
fn flow_dir(out: &Path) -> PathBuf {
    out.join("flow")
}
fn magnify_dir(out: &Path) -> PathBuf {
    out.join("magnify")
}
fn train_dir(out: &Path) -> PathBuf {
    out.join("train")
}
fn checkpoint_dir(out: &Path, db: &str) -> PathBuf {
    train_dir(out).join(db).join("checkpoint")
}

// parameter stamps let later stages refuse artifacts computed under other settings
const FLOW_STAMP: &str = "flow_params.json";
const MAG_STAMP: &str = "magnify_params.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_stamp<S: Serialize>(dir: &Path, name: &str, v: &S) -> Result<()> {
    write(&dir.join(name), serde_json::to_string_pretty(v).expect("stamp serialises"))
}

fn check_stamp<S: DeserializeOwned + PartialEq>(dir: &Path, name: &str, want: &S, stage: &str) -> Result<()> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| CliError::Prerequisite(format!("{} not found; run `infuse {stage}` first", path.display())))?;
    let have: S = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
    if &have != want {
        return Err(CliError::Prerequisite(format!(
            "{stage} artifacts were computed with different settings; rerun `infuse {stage}`"
        )));
    }
    Ok(())
}

fn load_manifest(out: &Path) -> Result<Manifest> {
    let p = manifest_path(corpus_dir(out));
    if !p.exists() {
        return Err(CliError::Prerequisite(format!(
            "{} not found; run `infuse gen` first",
            p.display()
        )));
    }
    Ok(Manifest::load(p)?)
}

fn pixels(cfg: &RunConfig, samples: usize) -> u64 {
    (samples * cfg.corpus.height * cfg.corpus.width) as u64
}

fn bench(out: &Path, stage: &str, input_size: u64, start: Instant) -> Result<()> {
    upsert_bench(
        out.join("bench.json"),
        BenchRecord {
            stage: stage.into(),
            input_size,
            wall_time_s: start.elapsed().as_secs_f64(),
            peak_memory_bytes: peak_memory_estimate(),
        },
    )?;
    Ok(())
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let dir = corpus_dir(out);
    let m = gen_corpus(&cfg.corpus, cfg.seed, &dir)?;
    let back = Manifest::load(manifest_path(&dir))?;
    if back.samples != m.samples {
        return Err(CliError::Invalid("manifest does not round-trip".into()));
    }
    println!("gen: {} samples in {} databases -> {}", m.samples.len(), m.database_ids().len(), dir.display());
    bench(out, "gen", pixels(cfg, m.samples.len()), start)
}

pub fn flow(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let m = load_manifest(out)?;
    let dir = flow_dir(out);
    create_dir(&dir)?;
    for rec in &m.samples {
        let onset: Image<f64> = load_frame(m.onset_path(rec))?;
        let apex: Image<f64> = load_frame(m.apex_path(rec))?;
        let img = optical_flow_image(&onset, &apex, &cfg.flow)?;
        let path = dir.join(format!("{}.ifnt", rec.sample_id));
        store_tensor(&img.to_tensor(), &path)?;
        let back = OpticalFlowImage::<f64>::from_tensor(&load_tensor(&path)?)?;
        if back.dims() != onset.dims() {
            return Err(CliError::Invalid(format!("{}: flow image dims", path.display())));
        }
    }
    write_stamp(&dir, FLOW_STAMP, &cfg.flow)?;
    println!("flow: {} optical-flow images -> {}", m.samples.len(), dir.display());
    bench(out, "flow", pixels(cfg, m.samples.len()), start)
}

pub fn magnify(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let m = load_manifest(out)?;
    let dir = magnify_dir(out);
    create_dir(&dir)?;
    let mag = &cfg.magnify;
    for rec in &m.samples {
        let onset: Image<f64> = load_frame(m.onset_path(rec))?;
        let apex: Image<f64> = load_frame(m.apex_path(rec))?;
        if mag.decoded {
            let pair = decoded_magnified_pair(&onset, &apex, &apex, mag)?;
            let img = Image::from_plane_clamped(pair.channels[0].clone());
            store_frame(&img, dir.join(format!("{}.pgm", rec.sample_id)))?;
        } else {
            let pair = magnified_latent_pair(&onset, &apex, &apex, mag)?;
            let t = pair.to_tensor();
            if t.dims != [mag.latent_channels(), onset.height(), onset.width()] {
                return Err(CliError::Invalid(format!("{}: latent dims {:?}", rec.sample_id, t.dims)));
            }
            store_tensor(&t, dir.join(format!("{}.ifnt", rec.sample_id)))?;
        }
    }
    write_stamp(&dir, MAG_STAMP, mag)?;
    let kind = if mag.decoded { "decoded frames" } else { "latent stacks" };
    println!("magnify: {} {kind} (alpha {}) -> {}", m.samples.len(), mag.alpha, dir.display());
    bench(out, "magnify", pixels(cfg, m.samples.len()), start)
}

/// Loads the corpus and prepares network inputs, requiring the flow and
/// magnify stages to have run with the current settings.
fn prepared(cfg: &RunConfig, out: &Path, mag: &MagConfig, need_magnify: bool) -> Result<(Manifest, Vec<PreparedSample>)> {
    let m = load_manifest(out)?;
    check_stamp::<FlowParams>(&flow_dir(out), FLOW_STAMP, &cfg.flow, "flow")?;
    if need_magnify {
        check_stamp::<MagConfig>(&magnify_dir(out), MAG_STAMP, mag, "magnify")?;
    }
    let data = prepare_dataset(&m, &cfg.flow, mag, cfg.train.max_offset, Some(&flow_dir(out)))?;
    Ok((m, data))
}

fn variant(cfg: &RunConfig, mag: &MagConfig) -> Result<Variant> {
    let mut v = Variant::new(&cfg.model, mag.input_channels())?;
    v.model.aux_flow_head = cfg.train.aux_flow_head && cfg.model.fusion == Fusion::Infuse;
    Ok(v)
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (m, data) = prepared(cfg, out, &cfg.magnify, true)?;
    let v = variant(cfg, &cfg.magnify)?;
    let folds = dataset_folds(&data)?;
    for fold in &folds {
        let t = Instant::now();
        let res = train_fold(&data, fold, &v, &cfg.train, cfg.seed)?;
        let dir = train_dir(out).join(&fold.held_out);
        create_dir(&dir)?;
        res.params.save(dir.join("checkpoint"))?;
        write(&dir.join("loss.csv"), curve_csv(&res.curve))?;
        let last = res.curve.last().map_or(f64::NAN, |p| p.loss);
        println!(
            "train: fold {} ({} train samples) final loss {last:.4} in {:.1}s",
            fold.held_out,
            fold.train.len(),
            t.elapsed().as_secs_f64()
        );
    }
    bench(out, "train", pixels(cfg, m.samples.len()), start)
}

fn load_checkpoint(out: &Path, fold: &Fold, v: &Variant, seed: u64) -> Result<ParamStore<f32>> {
    let dir = checkpoint_dir(out, &fold.held_out);
    if !dir.join("index.json").exists() {
        return Err(CliError::Prerequisite(format!(
            "{} not found; run `infuse train` first",
            dir.display()
        )));
    }
    let params = ParamStore::<f32>::load(&dir)?;
    v.model.init_params::<f32>(seed).check_compatible(&params)?;
    Ok(params)
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (m, data) = prepared(cfg, out, &cfg.magnify, true)?;
    let v = variant(cfg, &cfg.magnify)?;
    let folds = dataset_folds(&data)?;
    let mut reports = Vec::with_capacity(folds.len());
    for fold in &folds {
        let params = load_checkpoint(out, fold, &v, cfg.seed)?;
        reports.push(score_fold(&data, fold, &v, &params, &cfg.train)?);
    }
    let report = ProtocolReport::from_folds(reports)?;
    report.validate()?;
    let dir = out.join("eval");
    create_dir(&dir)?;
    let path = dir.join("report.json");
    write(&path, report.to_json())?;
    for f in &report.folds {
        println!("eval: held out {} macro-F1 {:.4}", f.held_out, f.macro_f1);
    }
    println!("eval: protocol macro-F1 {:.4} -> {}", report.protocol_macro_f1, path.display());
    bench(out, "eval", pixels(cfg, m.samples.len()), start)
}

pub fn ablate(cfg: &RunConfig, out: &Path, sweep: Sweep) -> Result<()> {
    let start = Instant::now();
    let dir = out.join("ablate");
    create_dir(&dir)?;
    let mut samples = 0;
    if matches!(sweep, Sweep::Factors | Sweep::All) {
        let mut rows = Vec::new();
        for &alpha in &cfg.eval.factors {
            let mag = MagConfig { alpha, ..cfg.magnify };
            let (m, data) = prepared(cfg, out, &mag, false)?;
            samples = m.samples.len();
            let r = run_protocol(&data, &variant(cfg, &mag)?, &cfg.train, cfg.seed)?;
            println!("ablate: alpha {alpha} macro-F1 {:.4}", r.protocol_macro_f1);
            rows.push(AblationRow::new(alpha.to_string(), vec![r.protocol_macro_f1]));
        }
        if rows.len() != cfg.eval.factors.len() {
            return Err(CliError::Invalid("factor sweep row count".into()));
        }
        write(&dir.join("factors.csv"), ablation_csv("factor", &rows))?;
    }
    if matches!(sweep, Sweep::Fusion | Sweep::All) {
        let latent = MagConfig {
            decoded: false,
            ..cfg.magnify
        };
        let decoded = MagConfig {
            decoded: true,
            ..cfg.magnify
        };
        let (m, lat) = prepared(cfg, out, &latent, false)?;
        let (_, dec) = prepared(cfg, out, &decoded, false)?;
        samples = m.samples.len();
        let mut rows = Vec::new();
        let mut arms: Vec<(String, RunConfig, MagConfig)> = fusion_variants(&cfg.model)
            .into_iter()
            .map(|(name, model)| (name.to_string(), RunConfig { model, ..cfg.clone() }, latent))
            .collect();
        let infuse = fusion_variants(&cfg.model).pop().expect("infuse arm").1;
        arms.push((
            "infuse_decoded".into(),
            RunConfig {
                model: infuse,
                ..cfg.clone()
            },
            decoded,
        ));
        for (name, arm_cfg, mag) in &arms {
            let data = if mag.decoded { &dec } else { &lat };
            let v = variant(arm_cfg, mag)?;
            let mut scores = Vec::new();
            for &seed in &cfg.eval.ablation_seeds {
                scores.push(run_protocol(data, &v, &cfg.train, seed)?.protocol_macro_f1);
            }
            let row = AblationRow::new(name.clone(), scores);
            println!("ablate: {name} mean macro-F1 {:.4}", row.mean);
            rows.push(row);
        }
        write(&dir.join("fusion.csv"), ablation_csv("variant", &rows))?;
    }
    bench(out, "ablate", pixels(cfg, samples), start)
}

fn first_positive(rec: &SampleRecord) -> usize {
    rec.au_labels.iter().position(|&v| v == 1).unwrap_or(0)
}

pub fn saliency(cfg: &RunConfig, out: &Path, count: usize) -> Result<()> {
    let start = Instant::now();
    let m = load_manifest(out)?;
    check_stamp::<FlowParams>(&flow_dir(out), FLOW_STAMP, &cfg.flow, "flow")?;
    check_stamp::<MagConfig>(&magnify_dir(out), MAG_STAMP, &cfg.magnify, "magnify")?;
    let v = variant(cfg, &cfg.magnify)?;
    let dbs = m.database_ids();
    let folds = infuse_core::eval::lodbo_folds(&m.samples.iter().map(|s| s.database_id.as_str()).collect::<Vec<_>>())?;
    let dir = out.join("saliency");
    create_dir(&dir)?;
    let picked: Vec<&SampleRecord> = m.samples.iter().take(count).collect();
    for rec in &picked {
        // explain each sample with the fold model that never saw it
        let fold = folds
            .iter()
            .find(|f| f.held_out == rec.database_id)
            .ok_or_else(|| CliError::Invalid(format!("no fold for {} among {dbs:?}", rec.database_id)))?;
        let params = load_checkpoint(out, fold, &v, cfg.seed)?;
        let s = prepare_sample(&m, rec, &cfg.flow, &cfg.magnify, 0, Some(&flow_dir(out)))?;
        let (flow, mag, _) = batch_inputs::<f32>(&[(&s, s.apex_index)])?;
        let class = first_positive(rec);
        let map = saliency_map(&v.model, &params, &flow, &mag, class, v.mode)?;
        let path = dir.join(format!("{}_{}.pgm", rec.sample_id, AU_NAMES[class]));
        store_frame(&Image::from_plane_clamped(map), &path)?;
    }
    println!("saliency: {} heat maps -> {}", picked.len(), dir.display());
    bench(out, "saliency", pixels(cfg, picked.len()), start)
}
