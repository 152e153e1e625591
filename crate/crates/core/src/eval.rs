//! Per-AU F1, macro-F1 and the leave-one-database-out protocol.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infusenet::{BackboneConfig, Fusion, MaskMode, ModelConfig, NUM_AUS};
use crate::synth::sub_seed;
use crate::autonet::ParamStore;
use crate::train::{decide, predict_logits, train_model, PreparedSample, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("macro-F1 needs exactly {NUM_AUS} values, got {0}")]
    Arity(usize),
    #[error("protocol needs at least 2 databases, found {0}")]
    TooFewDatabases(usize),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: String,
        #[source]
        source: TrainError,
    },
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Confusion counts of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }
}

pub fn class_counts(pred: &[[u8; NUM_AUS]], labels: &[[u8; NUM_AUS]]) -> Result<[ClassCounts; NUM_AUS], EvalError> {
    if pred.len() != labels.len() {
        return Err(EvalError::LengthMismatch(pred.len(), labels.len()));
    }
    let mut c = [ClassCounts::default(); NUM_AUS];
    for (p, y) in pred.iter().zip(labels) {
        for k in 0..NUM_AUS {
            match (p[k] == 1, y[k] == 1) {
                (true, true) => c[k].tp += 1,
                (true, false) => c[k].fp += 1,
                (false, true) => c[k].fn_ += 1,
                (false, false) => c[k].tn += 1,
            }
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)` per class; classes with no TP, FP or FN score 0.
pub fn f1_per_class(pred: &[[u8; NUM_AUS]], labels: &[[u8; NUM_AUS]]) -> Result<[f64; NUM_AUS], EvalError> {
    let c = class_counts(pred, labels)?;
    Ok(c.map(|k| k.f1()))
}

pub fn macro_f1(per_class: &[f64]) -> Result<f64, EvalError> {
    if per_class.len() != NUM_AUS {
        return Err(EvalError::Arity(per_class.len()));
    }
    Ok(per_class.iter().sum::<f64>() / NUM_AUS as f64)
}

/// Held-out database with the indices of its train and test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub held_out: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per database (sorted by id); `db_of[i]` is sample `i`'s database.
pub fn lodbo_folds<S: AsRef<str>>(db_of: &[S]) -> Result<Vec<Fold>, EvalError> {
    let mut dbs: Vec<&str> = db_of.iter().map(AsRef::as_ref).collect();
    dbs.sort_unstable();
    dbs.dedup();
    if dbs.len() < 2 {
        return Err(EvalError::TooFewDatabases(dbs.len()));
    }
    Ok(dbs
        .iter()
        .map(|&d| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..db_of.len()).partition(|&i| db_of[i].as_ref() == d);
            Fold {
                held_out: d.to_string(),
                train,
                test,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: String,
    pub per_au_f1: Vec<f64>,
    pub macro_f1: f64,
    pub support: Vec<usize>,
    pub counts: Vec<ClassCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub folds: Vec<FoldReport>,
    pub protocol_macro_f1: f64,
}

impl ProtocolReport {
    pub fn from_folds(mut folds: Vec<FoldReport>) -> Result<Self, EvalError> {
        if folds.is_empty() {
            return Err(EvalError::InvalidReport("no folds".into()));
        }
        folds.sort_by(|a, b| a.held_out.cmp(&b.held_out));
        let protocol_macro_f1 = folds.iter().map(|f| f.macro_f1).sum::<f64>() / folds.len() as f64;
        Ok(Self {
            folds,
            protocol_macro_f1,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Structural checks of a (possibly re-read) report.
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidReport(m));
        if self.folds.is_empty() {
            return bad("no folds".into());
        }
        let mut ids: Vec<&str> = self.folds.iter().map(|f| f.held_out.as_str()).collect();
        ids.dedup();
        if ids.len() != self.folds.len() {
            return bad("duplicate held-out database".into());
        }
        for f in &self.folds {
            if f.per_au_f1.len() != NUM_AUS || f.support.len() != NUM_AUS || f.counts.len() != NUM_AUS {
                return bad(format!("{}: per-AU arrays must have {NUM_AUS} entries", f.held_out));
            }
            if f.per_au_f1.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("{}: F1 outside [0, 1]", f.held_out));
            }
            let m = macro_f1(&f.per_au_f1)?;
            if (m - f.macro_f1).abs() > 1e-12 {
                return bad(format!("{}: macro_f1 {} != mean {m}", f.held_out, f.macro_f1));
            }
        }
        let mean = self.folds.iter().map(|f| f.macro_f1).sum::<f64>() / self.folds.len() as f64;
        if (mean - self.protocol_macro_f1).abs() > 1e-12 {
            return bad("protocol_macro_f1 is not the fold mean".into());
        }
        Ok(())
    }
}

/// Model variant of a protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub model: BackboneConfig,
    pub mode: MaskMode,
}

impl Variant {
    pub fn new(model: &ModelConfig, mag_channels: usize) -> Result<Self, EvalError> {
        let b = BackboneConfig::new(model, mag_channels).map_err(|e| EvalError::Train(e.into()))?;
        Ok(Self {
            model: b,
            mode: model.mask_mode(),
        })
    }
}

/// Trains the model of one fold on its training split.
pub fn train_fold(
    data: &[PreparedSample],
    fold: &Fold,
    variant: &Variant,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<f32>, EvalError> {
    let tr: Vec<&PreparedSample> = fold.train.iter().map(|&i| &data[i]).collect();
    let fold_seed = sub_seed(seed, &format!("fold:{}", fold.held_out));
    train_model::<f32>(&tr, &variant.model, train, variant.mode, fold_seed).map_err(|source| EvalError::Fold {
        fold: fold.held_out.clone(),
        source,
    })
}

/// Scores trained parameters on the held-out database of a fold.
pub fn score_fold(
    data: &[PreparedSample],
    fold: &Fold,
    variant: &Variant,
    params: &ParamStore<f32>,
    train: &TrainConfig,
) -> Result<FoldReport, EvalError> {
    let te: Vec<&PreparedSample> = fold.test.iter().map(|&i| &data[i]).collect();
    let logits =
        predict_logits(&te, &variant.model, params, variant.mode, train.batch).map_err(|source| EvalError::Fold {
            fold: fold.held_out.clone(),
            source,
        })?;
    let pred: Vec<[u8; NUM_AUS]> = logits.iter().map(|z| decide(z, train.loss)).collect();
    let labels: Vec<[u8; NUM_AUS]> = te.iter().map(|s| s.labels).collect();
    let counts = class_counts(&pred, &labels)?;
    let per_au_f1: Vec<f64> = counts.iter().map(ClassCounts::f1).collect();
    Ok(FoldReport {
        held_out: fold.held_out.clone(),
        macro_f1: macro_f1(&per_au_f1)?,
        per_au_f1,
        support: counts.iter().map(|c| c.tp + c.fn_).collect(),
        counts: counts.to_vec(),
    })
}

/// Trains and scores one fold.
pub fn run_fold(
    data: &[PreparedSample],
    fold: &Fold,
    variant: &Variant,
    train: &TrainConfig,
    seed: u64,
) -> Result<FoldReport, EvalError> {
    let out = train_fold(data, fold, variant, train, seed)?;
    score_fold(data, fold, variant, &out.params, train)
}

/// Folds of a prepared dataset.
pub fn dataset_folds(data: &[PreparedSample]) -> Result<Vec<Fold>, EvalError> {
    let dbs: Vec<&str> = data.iter().map(|s| s.database_id.as_str()).collect();
    lodbo_folds(&dbs)
}

/// Leave-one-database-out: trains from scratch per fold with a fold-derived
/// seed and averages the fold macro-F1 scores.
pub fn run_protocol(
    data: &[PreparedSample],
    variant: &Variant,
    train: &TrainConfig,
    seed: u64,
) -> Result<ProtocolReport, EvalError> {
    let folds = dataset_folds(data)?;
    let reports = folds
        .iter()
        .map(|f| run_fold(data, f, variant, train, seed))
        .collect::<Result<Vec<_>, _>>()?;
    ProtocolReport::from_folds(reports)
}

/// Variants compared by the fusion ablation, in table order.
pub fn fusion_variants(model: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let with = |fusion: Fusion, infusion: bool| ModelConfig {
        fusion,
        infusion,
        ..model.clone()
    };
    vec![
        ("single_flow", with(Fusion::SingleFlow, true)),
        ("single_mag", with(Fusion::SingleMag, true)),
        ("late", with(Fusion::Late, true)),
        ("infuse", with(Fusion::Infuse, true)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed_scores: Vec<f64>,
    pub mean: f64,
}

impl AblationRow {
    pub fn new(name: impl Into<String>, seed_scores: Vec<f64>) -> Self {
        let mean = seed_scores.iter().sum::<f64>() / seed_scores.len().max(1) as f64;
        Self {
            name: name.into(),
            seed_scores,
            mean,
        }
    }
}

pub fn ablation_csv(key: &str, rows: &[AblationRow]) -> String {
    let seeds = rows.first().map(|r| r.seed_scores.len()).unwrap_or(0);
    let mut s = key.to_string();
    for i in 0..seeds {
        s.push_str(&format!(",seed{i}"));
    }
    s.push_str(",mean_macro_f1\n");
    for r in rows {
        s.push_str(&r.name);
        for v in &r.seed_scores {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push_str(&format!(",{:.6}\n", r.mean));
    }
    s
}
