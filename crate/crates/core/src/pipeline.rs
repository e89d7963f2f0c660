//! End-to-end orchestration: featurization, fold preparation, model
//! training/evaluation, and the on-disk artifact formats the CLI stages
//! exchange. Every artifact records the config hash of the run that
//! produced it so downstream stages can detect mixups.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bio::{fit_imputer, impute, parse_biophys_csv, write_biophys_csv, BioImputer, BiophysRow};
use crate::dataset::{aggregate_by_signature, parse_records, ReformatRecord, SignatureSet};
use crate::error::{CoreError, Result};
use crate::eval::{
    ablation_masks, ablation_run, auprc, auroc, confusion_metrics, pearson, spearman,
    AblationTable, Confusion, FoldReport, FoldSummary,
};
use crate::fusion::{
    assemble, FeatureBlock, Modality, ModalityMask, Scaler,
};
use crate::linear::{
    fit_linear, fit_logistic, predict_proba, predict_value, LinearConfig, LinearModel, Penalty,
};
use crate::neural::{cnn1d_fit, mlp_fit, Cnn1d, CnnConfig, Mlp, MlpConfig, TrainTrace};
use crate::seq::{
    align_chain, one_hot_features, one_hot_labels, pool_embedding, EmbeddingMatrix,
    LinkerVocab, PositionMap,
};
use crate::splits::{FoldSpec, SplitPlan, SplitScheme};
use crate::structure::{parse_structure_file, StructurePair, FLAT_DIM, PAIR_POSITIONS, CHANNELS};
use crate::synth::{generate, stats_report, GenConfig};
use crate::tuning::{grid_search, random_search, Assignment, SearchOutcome, SearchSpace};
use crate::Task;

/// What is being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Qc,
    Yield,
    Sec,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "qc" => Some(TaskKind::Qc),
            "yield" => Some(TaskKind::Yield),
            "sec" => Some(TaskKind::Sec),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Qc => "qc",
            TaskKind::Yield => "yield",
            TaskKind::Sec => "sec",
        }
    }

    pub fn model_task(self) -> Task {
        match self {
            TaskKind::Qc | TaskKind::Sec => Task::Classify,
            TaskKind::Yield => Task::Regress,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Logistic,
    Linear,
    Mlp,
    Cnn,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "logistic" => Some(ModelKind::Logistic),
            "linear" => Some(ModelKind::Linear),
            "mlp" => Some(ModelKind::Mlp),
            "cnn" => Some(ModelKind::Cnn),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
        }
    }
}

/// Labels for a task, aligned to the signature set; `None` = unmeasured.
pub fn labels_for_task(sigs: &SignatureSet, task: TaskKind) -> Vec<Option<f64>> {
    sigs.signatures
        .iter()
        .map(|s| match task {
            TaskKind::Qc => s.qc_label.map(f64::from),
            TaskKind::Sec => s.sec_label.map(f64::from),
            TaskKind::Yield => s.yield_mean,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Feature bundle
// ---------------------------------------------------------------------------

/// In-memory inputs to featurization; maps are keyed as produced by the
/// generator and the file loaders (structures/embeddings by signature
/// digest, biophysics by canonical key).
pub struct BundleInputs<'a> {
    pub records: &'a [ReformatRecord],
    pub structures: Option<&'a BTreeMap<String, StructurePair>>,
    pub biophys: Option<&'a BTreeMap<String, BiophysRow>>,
    /// Pooled VH++VL embedding per signature digest.
    pub pooled_embeddings: Option<&'a BTreeMap<String, Vec<f64>>>,
    /// Optional externally computed alignment maps per signature digest.
    pub posmaps: Option<&'a BTreeMap<String, (Option<PositionMap>, Option<PositionMap>)>>,
}

impl<'a> BundleInputs<'a> {
    pub fn new(records: &'a [ReformatRecord]) -> BundleInputs<'a> {
        BundleInputs {
            records,
            structures: None,
            biophys: None,
            pooled_embeddings: None,
            posmaps: None,
        }
    }
}

/// All per-signature feature blocks for one dataset.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub sigs: SignatureSet,
    pub vocab: LinkerVocab,
    pub seq: FeatureBlock,
    pub struct_: Option<FeatureBlock>,
    pub rmsd: Option<FeatureBlock>,
    pub bio_rows: Option<Vec<BiophysRow>>,
    pub emb: Option<FeatureBlock>,
}

impl FeatureBundle {
    /// Featurize a record set: aggregate signatures, then build the
    /// per-modality blocks that are available from the given inputs.
    pub fn build(inputs: &BundleInputs) -> Result<FeatureBundle> {
        let sigs = aggregate_by_signature(inputs.records)?;
        if sigs.is_empty() {
            return Err(CoreError::config("no signatures to featurize"));
        }
        let vocab =
            LinkerVocab::from_ids(sigs.signatures.iter().map(|s| s.key.linker_id.clone()));

        // Sequence one-hot block.
        let labels = one_hot_labels(&vocab);
        let dim = labels.len();
        let mut seq_data = Array2::zeros((sigs.len(), dim));
        for (i, sig) in sigs.signatures.iter().enumerate() {
            let digest = sig.key.digest();
            let (vh_map, vl_map) = match inputs.posmaps.and_then(|m| m.get(&digest)) {
                Some((vh, vl)) => (vh.as_ref(), vl.as_ref()),
                None => (None, None),
            };
            let vh = align_chain(&sig.key.vh_seq, vh_map)?;
            let vl = align_chain(&sig.key.vl_seq, vl_map)?;
            let row =
                one_hot_features(&vh, &vl, sig.key.orientation, &sig.key.linker_id, &vocab)?;
            seq_data.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        let seq = FeatureBlock::new(Modality::Seq, labels, seq_data)?;

        // Structure blocks.
        let (struct_, rmsd) = match inputs.structures {
            None => (None, None),
            Some(map) => {
                let rows: Vec<Result<(Vec<f64>, f64, f64)>> = sigs
                    .signatures
                    .par_iter()
                    .map(|sig| {
                        let digest = sig.key.digest();
                        let pair = map.get(&digest).ok_or_else(|| {
                            CoreError::MissingArtifact(format!(
                                "structure pair for signature {digest}"
                            ))
                        })?;
                        let feats = pair.features()?;
                        Ok((feats.per_residue, feats.rmsd_vh, feats.rmsd_vl))
                    })
                    .collect();
                let mut sdata = Array2::zeros((sigs.len(), FLAT_DIM));
                let mut rdata = Array2::zeros((sigs.len(), 2));
                for (i, row) in rows.into_iter().enumerate() {
                    let (flat, rvh, rvl) = row?;
                    sdata.row_mut(i).assign(&ndarray::ArrayView1::from(&flat));
                    rdata[(i, 0)] = rvh;
                    rdata[(i, 1)] = rvl;
                }
                let slabels = struct_labels();
                (
                    Some(FeatureBlock::new(Modality::Struct, slabels, sdata)?),
                    Some(FeatureBlock::new(
                        Modality::Rmsd,
                        vec!["rmsd:VH".into(), "rmsd:VL".into()],
                        rdata,
                    )?),
                )
            }
        };

        // Biophysics rows (imputed fold-wise later).
        let bio_rows = inputs.biophys.map(|map| {
            sigs.signatures
                .iter()
                .map(|sig| map.get(&sig.key.canonical()).copied().unwrap_or_default())
                .collect::<Vec<BiophysRow>>()
        });

        // Pooled embedding block.
        let emb = match inputs.pooled_embeddings {
            None => None,
            Some(map) => {
                let mut width = 0;
                let mut rows = Vec::with_capacity(sigs.len());
                for sig in &sigs.signatures {
                    let digest = sig.key.digest();
                    let row = map.get(&digest).ok_or_else(|| {
                        CoreError::MissingArtifact(format!("embedding for signature {digest}"))
                    })?;
                    if width == 0 {
                        width = row.len();
                    } else if row.len() != width {
                        return Err(CoreError::dimension("embedding widths differ"));
                    }
                    rows.push(row.clone());
                }
                let mut data = Array2::zeros((sigs.len(), width));
                for (i, row) in rows.iter().enumerate() {
                    data.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
                }
                let labels = (0..width).map(|i| format!("emb:{i:04}")).collect();
                Some(FeatureBlock::new(Modality::Emb, labels, data)?)
            }
        };

        Ok(FeatureBundle { sigs, vocab, seq, struct_, rmsd, bio_rows, emb })
    }

    /// Blocks available for mask-based assembly, with the bio block built
    /// from the given imputer.
    fn blocks_for(&self, mask: &ModalityMask, imputer: Option<&BioImputer>) -> Result<Vec<FeatureBlock>> {
        let mut blocks = vec![self.seq.clone()];
        if let Some(b) = &self.struct_ {
            blocks.push(b.clone());
        }
        if let Some(b) = &self.rmsd {
            blocks.push(b.clone());
        }
        if mask.bio {
            let rows = self.bio_rows.as_ref().ok_or_else(|| {
                CoreError::MissingArtifact("biophysical rows (bio modality requested)".into())
            })?;
            let imputer = imputer
                .ok_or_else(|| CoreError::config("bio modality requires a fitted imputer"))?;
            let data = impute(rows, imputer);
            blocks.push(FeatureBlock::new(
                Modality::Bio,
                crate::bio::BIO_COLUMNS.iter().map(|c| format!("bio:{c}")).collect(),
                data,
            )?);
        }
        Ok(blocks)
    }

    /// Per-residue coordinate tensors (n, channels, positions) for the CNN.
    pub fn struct_tensors(&self) -> Result<Array3<f64>> {
        let block = self.struct_.as_ref().ok_or_else(|| {
            CoreError::MissingArtifact("structure block (needed for CNN input)".into())
        })?;
        let n = block.rows();
        let mut out = Array3::zeros((n, CHANNELS, PAIR_POSITIONS));
        for i in 0..n {
            for p in 0..PAIR_POSITIONS {
                for c in 0..CHANNELS {
                    out[(i, c, p)] = block.data[(i, p * CHANNELS + c)];
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut sig_out = Vec::new();
        self.sigs.write_jsonl(&mut sig_out)?;
        fs::write(dir.join("signatures.jsonl"), sig_out)?;
        fs::write(dir.join("vocab.json"), serde_json::to_vec_pretty(&self.vocab)?)?;
        self.seq.save(dir, "seq")?;
        if let Some(b) = &self.struct_ {
            b.save(dir, "struct")?;
        }
        if let Some(b) = &self.rmsd {
            b.save(dir, "rmsd")?;
        }
        if let Some(b) = &self.emb {
            b.save(dir, "emb")?;
        }
        if let Some(rows) = &self.bio_rows {
            let map: BTreeMap<String, BiophysRow> = self
                .sigs
                .signatures
                .iter()
                .zip(rows)
                .map(|(s, r)| (s.key.canonical(), *r))
                .collect();
            let mut buf = Vec::new();
            write_biophys_csv(&map, &mut buf)?;
            fs::write(dir.join("bio.csv"), buf)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<FeatureBundle> {
        let sig_path = dir.join("signatures.jsonl");
        if !sig_path.exists() {
            return Err(CoreError::MissingArtifact(format!(
                "feature bundle at {} (signatures.jsonl)",
                dir.display()
            )));
        }
        let sigs = SignatureSet::read_jsonl(fs::File::open(sig_path)?)?;
        let mut vocab: LinkerVocab = serde_json::from_slice(&fs::read(dir.join("vocab.json"))?)?;
        vocab.rebuild_index();
        let seq = FeatureBlock::load(dir, "seq")?;
        let load_opt = |stem: &str| -> Result<Option<FeatureBlock>> {
            if dir.join(format!("{stem}.json")).exists() {
                Ok(Some(FeatureBlock::load(dir, stem)?))
            } else {
                Ok(None)
            }
        };
        let struct_ = load_opt("struct")?;
        let rmsd = load_opt("rmsd")?;
        let emb = load_opt("emb")?;
        let bio_rows = if dir.join("bio.csv").exists() {
            let map = parse_biophys_csv(fs::File::open(dir.join("bio.csv"))?)?;
            Some(
                sigs.signatures
                    .iter()
                    .map(|s| map.get(&s.key.canonical()).copied().unwrap_or_default())
                    .collect(),
            )
        } else {
            None
        };
        Ok(FeatureBundle { sigs, vocab, seq, struct_, rmsd, bio_rows, emb })
    }
}

fn struct_labels() -> Vec<String> {
    let channels = ["px", "py", "pz", "sx", "sy", "sz", "pgap", "sgap"];
    let mut labels = Vec::with_capacity(FLAT_DIM);
    for chain in ["VH", "VL"] {
        for pos in 1..=crate::seq::ALIGNED_LEN {
            for ch in channels {
                labels.push(format!("struct:{chain}:{pos:03}:{ch}"));
            }
        }
    }
    labels
}

// ---------------------------------------------------------------------------
// Fold preparation
// ---------------------------------------------------------------------------

/// Train-fitted preprocessing bundled with every model artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPreprocess {
    pub mask: ModalityMask,
    pub imputer: Option<BioImputer>,
    pub scaler: Scaler,
}

/// Label-filtered, assembled, and standardized data for one fold.
pub struct FoldData {
    pub x_train: Array2<f64>,
    pub y_train: Vec<f64>,
    pub x_val: Array2<f64>,
    pub y_val: Vec<f64>,
    pub x_test: Array2<f64>,
    pub y_test: Vec<f64>,
    pub preprocess: FoldPreprocess,
}

fn labeled_indices(plan_part: &[usize], labels: &[Option<f64>]) -> Vec<usize> {
    plan_part.iter().copied().filter(|&i| labels[i].is_some()).collect()
}

fn gather_labels(indices: &[usize], labels: &[Option<f64>]) -> Vec<f64> {
    indices.iter().map(|&i| labels[i].unwrap()).collect()
}

/// Assemble the masked design matrix for one fold with train-only fitted
/// imputation and scaling.
pub fn prepare_fold(
    bundle: &FeatureBundle,
    plan: &SplitPlan,
    mask: &ModalityMask,
    task: TaskKind,
) -> Result<FoldData> {
    mask.validate()?;
    let labels = labels_for_task(&bundle.sigs, task);
    let train_idx = labeled_indices(&plan.train, &labels);
    let val_idx = labeled_indices(&plan.val, &labels);
    let test_idx = labeled_indices(&plan.test, &labels);
    if train_idx.len() < 2 {
        return Err(CoreError::config("fold has fewer than 2 labeled training rows"));
    }

    let imputer = if mask.bio {
        let rows = bundle.bio_rows.as_ref().ok_or_else(|| {
            CoreError::MissingArtifact("biophysical rows (bio modality requested)".into())
        })?;
        let train_rows: Vec<BiophysRow> = train_idx.iter().map(|&i| rows[i]).collect();
        Some(fit_imputer(&train_rows)?)
    } else {
        None
    };

    let blocks = bundle.blocks_for(mask, imputer.as_ref())?;
    let refs: Vec<&FeatureBlock> = blocks.iter().collect();
    let design = assemble(&refs, mask)?;

    let mut x_train = design.data.select(Axis(0), &train_idx);
    let mut x_val = design.data.select(Axis(0), &val_idx);
    let mut x_test = design.data.select(Axis(0), &test_idx);
    let scaler = Scaler::fit(x_train.view(), &design.continuous_columns())?;
    scaler.apply(&mut x_train)?;
    scaler.apply(&mut x_val)?;
    scaler.apply(&mut x_test)?;

    Ok(FoldData {
        x_train,
        y_train: gather_labels(&train_idx, &labels),
        x_val,
        y_val: gather_labels(&val_idx, &labels),
        x_test,
        y_test: gather_labels(&test_idx, &labels),
        preprocess: FoldPreprocess { mask: *mask, imputer, scaler },
    })
}

/// Classification metrics on one scored test set, oriented so that
/// `positive_class` is the class scores rank toward.
fn classification_metrics(
    proba_of_1: &[f64],
    y_test: &[f64],
    positive_class: u8,
) -> Result<BTreeMap<String, f64>> {
    let labels: Vec<u8> = y_test.iter().map(|&v| v as u8).collect();
    let scores: Vec<f64> = if positive_class == 1 {
        proba_of_1.to_vec()
    } else {
        proba_of_1.iter().map(|p| 1.0 - p).collect()
    };
    let pred: Vec<u8> = proba_of_1.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let mut out = BTreeMap::new();
    out.insert("auroc".to_string(), auroc(&scores, &labels, positive_class)?);
    out.insert("auprc".to_string(), auprc(&scores, &labels, positive_class)?);
    let acc = confusion_metrics(&Confusion::from_labels(&pred, &labels, 1))
        .accuracy
        .ok_or_else(|| CoreError::config("empty test set"))?;
    out.insert("accuracy".to_string(), acc);
    Ok(out)
}

fn regression_metrics(pred: &[f64], y_test: &[f64]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    out.insert("pearson".to_string(), pearson(pred, y_test)?);
    out.insert("spearman".to_string(), spearman(pred, y_test)?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model artifacts
// ---------------------------------------------------------------------------

/// A fitted per-fold model with its preprocessing, serializable as JSON
/// (plus a binary tensor file for neural parameters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub model: ModelKind,
    pub task: TaskKind,
    pub fold: usize,
    pub config_hash: String,
    pub preprocess: Option<FoldPreprocess>,
    pub linear: Option<LinearModel>,
    pub mlp_config: Option<MlpConfig>,
    pub cnn_config: Option<CnnConfig>,
    pub input_dim: Option<usize>,
    pub trace: Option<TrainTrace>,
    /// Running batch-norm statistics for CNN checkpoints.
    pub running: Option<crate::neural::cnn::RunningStats>,
}

impl ModelArtifact {
    fn stem(fold: usize) -> String {
        format!("fold_{fold:02}")
    }

    pub fn save(&self, dir: &Path, params: Option<&[f64]>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let stem = Self::stem(self.fold);
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(self)?)?;
        if let Some(params) = params {
            let mut bytes = Vec::with_capacity(params.len() * 8);
            for v in params {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(format!("{stem}.params.bin")), bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, fold: usize) -> Result<(ModelArtifact, Option<Vec<f64>>)> {
        let stem = Self::stem(fold);
        let json_path = dir.join(format!("{stem}.json"));
        if !json_path.exists() {
            return Err(CoreError::MissingArtifact(format!(
                "trained model {} in {}",
                stem,
                dir.display()
            )));
        }
        let artifact: ModelArtifact = serde_json::from_slice(&fs::read(&json_path)?)?;
        let params_path = dir.join(format!("{stem}.params.bin"));
        let params = if params_path.exists() {
            let bytes = fs::read(&params_path)?;
            Some(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            None
        };
        Ok((artifact, params))
    }
}

// ---------------------------------------------------------------------------
// Fold evaluation
// ---------------------------------------------------------------------------

/// Configuration of one modeling run over folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub mask: ModalityMask,
    pub linear: LinearConfig,
    pub mlp: MlpConfig,
    pub cnn: CnnConfig,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, mask: ModalityMask, task: TaskKind) -> ModelSpec {
        let model_task = task.model_task();
        ModelSpec {
            kind,
            mask,
            linear: match model_task {
                Task::Classify => LinearConfig::classification_default(),
                Task::Regress => LinearConfig::regression_default(),
            },
            mlp: MlpConfig::default_for(model_task),
            cnn: match model_task {
                Task::Classify => CnnConfig::classification_default(),
                Task::Regress => CnnConfig::regression_default(),
            },
        }
    }

    fn check_task(&self, task: TaskKind) -> Result<()> {
        match (self.kind, task.model_task()) {
            (ModelKind::Logistic, Task::Regress) => {
                Err(CoreError::config("logistic regression cannot fit the yield task"))
            }
            (ModelKind::Linear, Task::Classify) => {
                Err(CoreError::config("linear regression requires the yield task"))
            }
            _ => Ok(()),
        }
    }
}

/// Fit one fold and score its test partition. Returns per-metric values,
/// the artifact, and (for neural models) the flat parameter vector.
pub fn eval_fold(
    bundle: &FeatureBundle,
    plan: &SplitPlan,
    spec: &ModelSpec,
    task: TaskKind,
    fold: usize,
    positive_class: u8,
    config_hash: &str,
) -> Result<(BTreeMap<String, f64>, ModelArtifact, Option<Vec<f64>>)> {
    spec.check_task(task)?;
    let mut artifact = ModelArtifact {
        model: spec.kind,
        task,
        fold,
        config_hash: config_hash.to_string(),
        preprocess: None,
        linear: None,
        mlp_config: None,
        cnn_config: None,
        input_dim: None,
        trace: None,
        running: None,
    };

    match spec.kind {
        ModelKind::Logistic | ModelKind::Linear => {
            let data = prepare_fold(bundle, plan, &spec.mask, task)?;
            if data.y_test.is_empty() {
                return Err(CoreError::config("fold has no labeled test rows"));
            }
            let mut cfg = spec.linear;
            cfg.task = task.model_task();
            let model = match cfg.task {
                Task::Classify => fit_logistic(data.x_train.view(), &data.y_train, cfg)?,
                Task::Regress => fit_linear(data.x_train.view(), &data.y_train, cfg)?,
            };
            let metrics = match cfg.task {
                Task::Classify => {
                    let proba = predict_proba(&model, data.x_test.view())?;
                    classification_metrics(&proba, &data.y_test, positive_class)?
                }
                Task::Regress => {
                    let pred = predict_value(&model, data.x_test.view())?;
                    regression_metrics(&pred, &data.y_test)?
                }
            };
            artifact.preprocess = Some(data.preprocess);
            artifact.linear = Some(model);
            Ok((metrics, artifact, None))
        }
        ModelKind::Mlp => {
            let emb = bundle.emb.as_ref().ok_or_else(|| {
                CoreError::MissingArtifact("pooled embedding block (needed for MLP)".into())
            })?;
            let labels = labels_for_task(&bundle.sigs, task);
            let train_idx = labeled_indices(&plan.train, &labels);
            let val_idx = labeled_indices(&plan.val, &labels);
            let test_idx = labeled_indices(&plan.test, &labels);
            if val_idx.is_empty() {
                return Err(CoreError::config("MLP training requires a validation partition"));
            }
            let mut x_train = emb.data.select(Axis(0), &train_idx);
            let mut x_val = emb.data.select(Axis(0), &val_idx);
            let mut x_test = emb.data.select(Axis(0), &test_idx);
            let continuous = vec![true; emb.cols()];
            let scaler = Scaler::fit(x_train.view(), &continuous)?;
            scaler.apply(&mut x_train)?;
            scaler.apply(&mut x_val)?;
            scaler.apply(&mut x_test)?;

            let mut cfg = spec.mlp;
            cfg.task = task.model_task();
            let (model, trace) = mlp_fit(
                x_train.view(),
                &gather_labels(&train_idx, &labels),
                x_val.view(),
                &gather_labels(&val_idx, &labels),
                cfg,
            )?;
            let y_test = gather_labels(&test_idx, &labels);
            let pred = model.predict(x_test.view())?;
            let metrics = match cfg.task {
                Task::Classify => classification_metrics(&pred, &y_test, positive_class)?,
                Task::Regress => regression_metrics(&pred, &y_test)?,
            };
            artifact.preprocess = Some(FoldPreprocess {
                mask: spec.mask,
                imputer: None,
                scaler,
            });
            artifact.mlp_config = Some(cfg);
            artifact.input_dim = Some(emb.cols());
            artifact.trace = Some(trace);
            Ok((metrics, artifact, Some(model.params)))
        }
        ModelKind::Cnn => {
            let tensors = bundle.struct_tensors()?;
            let labels = labels_for_task(&bundle.sigs, task);
            let train_idx = labeled_indices(&plan.train, &labels);
            let val_idx = labeled_indices(&plan.val, &labels);
            let test_idx = labeled_indices(&plan.test, &labels);
            if val_idx.is_empty() {
                return Err(CoreError::config("CNN training requires a validation partition"));
            }
            let gather = |idx: &[usize]| -> Array3<f64> {
                let mut out = Array3::zeros((idx.len(), CHANNELS, PAIR_POSITIONS));
                for (bi, &ri) in idx.iter().enumerate() {
                    out.index_axis_mut(Axis(0), bi)
                        .assign(&tensors.index_axis(Axis(0), ri));
                }
                out
            };
            let mut cfg = spec.cnn;
            cfg.task = task.model_task();
            let (model, trace) = cnn1d_fit(
                gather(&train_idx).view(),
                &gather_labels(&train_idx, &labels),
                gather(&val_idx).view(),
                &gather_labels(&val_idx, &labels),
                cfg,
            )?;
            let y_test = gather_labels(&test_idx, &labels);
            let pred = model.predict(gather(&test_idx).view())?;
            let metrics = match cfg.task {
                Task::Classify => classification_metrics(&pred, &y_test, positive_class)?,
                Task::Regress => regression_metrics(&pred, &y_test)?,
            };
            artifact.cnn_config = Some(cfg);
            artifact.trace = Some(trace);
            artifact.running = Some(model.running.clone());
            Ok((metrics, artifact, Some(model.params)))
        }
    }
}

/// Fit and score every fold, aggregating metrics to mean ± std.
pub fn eval_across_folds(
    bundle: &FeatureBundle,
    plans: &[SplitPlan],
    spec: &ModelSpec,
    task: TaskKind,
    positive_class: u8,
) -> Result<FoldReport> {
    if plans.is_empty() {
        return Err(CoreError::config("no folds to evaluate"));
    }
    let results: Vec<Result<BTreeMap<String, f64>>> = plans
        .par_iter()
        .enumerate()
        .map(|(k, plan)| eval_fold(bundle, plan, spec, task, k, positive_class, "").map(|r| r.0))
        .collect();
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        for (name, value) in r? {
            per_metric.entry(name).or_default().push(value);
        }
    }
    FoldReport::from_per_fold(&per_metric)
}

// ---------------------------------------------------------------------------
// Stage manifests and reports
// ---------------------------------------------------------------------------

pub fn hash_of_json<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Per-stage run manifest: config hash, seed, timings, upstream hashes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub timings_ms: BTreeMap<String, u64>,
    pub upstream: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn new(stage: &str, config_hash: String, seed: u64) -> StageManifest {
        StageManifest {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            timings_ms: BTreeMap::new(),
            upstream: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<StageManifest> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(CoreError::MissingArtifact(format!(
                "stage manifest at {}",
                path.display()
            )));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Warn (stderr) when a downstream stage consumes artifacts whose config
/// hash differs from what an upstream manifest recorded.
pub fn warn_on_hash_mismatch(expected: &str, found: &str, what: &str) {
    if expected != found {
        eprintln!(
            "warning: config hash mismatch for {what}: expected {expected}, found {found}"
        );
    }
}

/// One row of the model × split × metric results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub features: String,
    pub split: String,
    pub task: String,
    pub metrics: BTreeMap<String, FoldSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let metric_names: Vec<String> = {
            let mut names = std::collections::BTreeSet::new();
            for row in &self.rows {
                for name in row.metrics.keys() {
                    names.insert(name.clone());
                }
            }
            names.into_iter().collect()
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<20} {:<10} {:<6}",
            "model", "features", "split", "task"
        ));
        for name in &metric_names {
            out.push_str(&format!(" {:<16}", name));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{:<10} {:<20} {:<10} {:<6}",
                row.model, row.features, row.split, row.task
            ));
            for name in &metric_names {
                match row.metrics.get(name) {
                    Some(s) => out.push_str(&format!(" {:>6.4} ± {:<6.4} ", s.mean, s.std)),
                    None => out.push_str(&format!(" {:<16}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn render_tsv(&self) -> String {
        let mut out = String::from("model\tfeatures\tsplit\ttask\tmetric\tmean\tstd\tfolds\n");
        for row in &self.rows {
            for (name, s) in &row.metrics {
                let folds: Vec<String> = s.folds.iter().map(|v| format!("{v}")).collect();
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    row.model,
                    row.features,
                    row.split,
                    row.task,
                    name,
                    s.mean,
                    s.std,
                    folds.join(",")
                ));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Stage runners (the CLI's backend)
// ---------------------------------------------------------------------------

/// Paths and knobs shared by stage commands; usually parsed from a config
/// file and overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub records: Option<PathBuf>,
    pub structures: Option<PathBuf>,
    pub biophys: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub posmaps: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub scheme: SplitScheme,
    pub n_folds: usize,
    pub ratios: (f64, f64, f64),
    pub mask: ModalityMask,
    pub model: ModelKind,
    pub task: TaskKind,
    pub target_family: Option<String>,
    pub batch_size: usize,
    pub positive_class: u8,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            records: None,
            structures: None,
            biophys: None,
            embeddings: None,
            posmaps: None,
            out_dir: PathBuf::from("out"),
            scheme: SplitScheme::Signature,
            n_folds: crate::splits::DEFAULT_FOLDS,
            ratios: (0.6, 0.1, 0.3),
            mask: ModalityMask::all(),
            model: ModelKind::Logistic,
            task: TaskKind::Qc,
            target_family: None,
            batch_size: crate::splits::DEFAULT_BATCH_SIZE,
            positive_class: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn config_hash(&self) -> Result<String> {
        hash_of_json(self)
    }

    pub fn fold_spec(&self) -> Result<FoldSpec> {
        let mut spec = FoldSpec::new(self.scheme);
        spec.ratios = crate::splits::Ratios {
            train: self.ratios.0,
            val: self.ratios.1,
            test: self.ratios.2,
        };
        spec.target_family = self.target_family.clone();
        spec.batch_size = self.batch_size;
        Ok(spec)
    }
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// `gen`: write a synthetic dataset (plus optional embeddings) to disk.
pub fn run_gen(config: &GenConfig, out_dir: &Path, embedding_dim: Option<usize>) -> Result<()> {
    let start = Instant::now();
    let data = generate(config)?;
    data.write_to_dir(out_dir)?;
    if let Some(dim) = embedding_dim {
        data.write_embeddings(out_dir, dim)?;
    }
    let report = stats_report(&data.records)?;
    fs::write(out_dir.join("stats.json"), serde_json::to_vec_pretty(&report)?)?;

    let mut manifest = StageManifest::new("gen", hash_of_json(config)?, config.seed);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(out_dir)?;
    println!("{}", report.render());
    Ok(())
}

/// Load structure pairs from a directory of `<digest>.{parental,scfv}.txt`.
pub fn load_structures_dir(dir: &Path) -> Result<BTreeMap<String, StructurePair>> {
    if !dir.is_dir() {
        return Err(CoreError::MissingArtifact(format!(
            "structures directory {}",
            dir.display()
        )));
    }
    let mut out = BTreeMap::new();
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(digest) = name.strip_suffix(".parental.txt") {
            let parental = parse_structure_file(fs::File::open(&path)?)?;
            let scfv_path = dir.join(format!("{digest}.scfv.txt"));
            if !scfv_path.exists() {
                return Err(CoreError::MissingArtifact(format!(
                    "scFv structure file for {digest}"
                )));
            }
            let scfv = parse_structure_file(fs::File::open(&scfv_path)?)?;
            out.insert(digest.to_string(), StructurePair { parental, scfv });
        }
    }
    Ok(out)
}

/// Load and mean-pool per-signature embedding files from a directory of
/// `<digest>.{VH,VL}.emb`.
pub fn load_pooled_embeddings(dir: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    if !dir.is_dir() {
        return Err(CoreError::MissingArtifact(format!(
            "embeddings directory {}",
            dir.display()
        )));
    }
    let mut out = BTreeMap::new();
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(digest) = name.strip_suffix(".VH.emb") {
            let vh = EmbeddingMatrix::parse(fs::File::open(&path)?)?;
            let vl_path = dir.join(format!("{digest}.VL.emb"));
            if !vl_path.exists() {
                return Err(CoreError::MissingArtifact(format!("VL embedding for {digest}")));
            }
            let vl = EmbeddingMatrix::parse(fs::File::open(&vl_path)?)?;
            let mut pooled = pool_embedding(&vh)?;
            pooled.extend(pool_embedding(&vl)?);
            out.insert(digest.to_string(), pooled);
        }
    }
    Ok(out)
}

fn load_posmaps_dir(
    dir: &Path,
) -> Result<BTreeMap<String, (Option<PositionMap>, Option<PositionMap>)>> {
    let mut out: BTreeMap<String, (Option<PositionMap>, Option<PositionMap>)> = BTreeMap::new();
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        for (suffix, is_vh) in [(".VH.posmap", true), (".VL.posmap", false)] {
            if let Some(digest) = name.strip_suffix(suffix) {
                let map = PositionMap::parse(fs::File::open(&path)?)?;
                let entry = out.entry(digest.to_string()).or_insert((None, None));
                if is_vh {
                    entry.0 = Some(map);
                } else {
                    entry.1 = Some(map);
                }
            }
        }
    }
    Ok(out)
}

/// `featurize`: parse raw inputs and persist the feature bundle.
pub fn run_featurize(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let records_path = cfg
        .records
        .as_ref()
        .ok_or_else(|| CoreError::config("featurize requires a records path"))?;
    if !records_path.exists() {
        return Err(CoreError::MissingArtifact(format!(
            "records file {}",
            records_path.display()
        )));
    }
    let parse = parse_records(fs::File::open(records_path)?)?;
    for issue in &parse.rejected {
        eprintln!("warning: rejected row {}: {}", issue.line, issue.reason);
    }
    for w in &parse.warnings {
        eprintln!("warning: {w}");
    }

    let structures = match &cfg.structures {
        Some(dir) => Some(load_structures_dir(dir)?),
        None => None,
    };
    let biophys = match &cfg.biophys {
        Some(path) => {
            if !path.exists() {
                return Err(CoreError::MissingArtifact(format!(
                    "biophysics file {}",
                    path.display()
                )));
            }
            Some(parse_biophys_csv(fs::File::open(path)?)?)
        }
        None => None,
    };
    let embeddings = match &cfg.embeddings {
        Some(dir) => Some(load_pooled_embeddings(dir)?),
        None => None,
    };
    let posmaps = match &cfg.posmaps {
        Some(dir) => Some(load_posmaps_dir(dir)?),
        None => None,
    };

    let bundle = FeatureBundle::build(&BundleInputs {
        records: &parse.records,
        structures: structures.as_ref(),
        biophys: biophys.as_ref(),
        pooled_embeddings: embeddings.as_ref(),
        posmaps: posmaps.as_ref(),
    })?;
    bundle.save(&cfg.out_dir)?;

    let mut manifest = StageManifest::new("featurize", cfg.config_hash()?, cfg.seed);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&cfg.out_dir)?;
    println!(
        "featurized {} signatures ({} rejected rows)",
        bundle.sigs.len(),
        parse.rejected.len()
    );
    Ok(())
}

/// `split`: generate fold plans against a feature bundle.
pub fn run_split(cfg: &RunConfig, features_dir: &Path) -> Result<()> {
    let start = Instant::now();
    let bundle = FeatureBundle::load(features_dir)?;
    let spec = cfg.fold_spec()?;
    let plans = crate::splits::make_folds(&spec, &bundle.sigs, cfg.n_folds, cfg.seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut out = fs::File::create(cfg.out_dir.join("folds.jsonl"))?;
    for plan in &plans {
        serde_json::to_writer(&mut out, plan)?;
        out.write_all(b"\n")?;
    }

    let features_manifest = StageManifest::load(features_dir)?;
    let mut manifest = StageManifest::new("split", cfg.config_hash()?, cfg.seed);
    manifest.upstream.insert("features".into(), features_manifest.config_hash);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&cfg.out_dir)?;
    println!("wrote {} fold plans ({})", plans.len(), cfg.scheme.as_str());
    Ok(())
}

pub fn load_folds(splits_dir: &Path) -> Result<Vec<SplitPlan>> {
    let path = splits_dir.join("folds.jsonl");
    if !path.exists() {
        return Err(CoreError::MissingArtifact(format!(
            "fold plans at {}",
            path.display()
        )));
    }
    let content = fs::read_to_string(path)?;
    let mut plans = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let plan: SplitPlan = serde_json::from_str(line)
            .map_err(|e| CoreError::parse(i + 1, format!("bad fold plan: {e}")))?;
        plans.push(plan);
    }
    Ok(plans)
}

/// `train`: fit one model per fold and write artifacts.
pub fn run_train(cfg: &RunConfig, features_dir: &Path, splits_dir: &Path) -> Result<()> {
    let start = Instant::now();
    let bundle = FeatureBundle::load(features_dir)?;
    let plans = load_folds(splits_dir)?;
    let spec = ModelSpec::new(cfg.model, cfg.mask, cfg.task);
    spec.check_task(cfg.task)?;
    let config_hash = cfg.config_hash()?;

    let results: Vec<Result<(BTreeMap<String, f64>, ModelArtifact, Option<Vec<f64>>)>> = plans
        .par_iter()
        .enumerate()
        .map(|(k, plan)| eval_fold(&bundle, plan, &spec, cfg.task, k, cfg.positive_class, &config_hash))
        .collect();
    fs::create_dir_all(&cfg.out_dir)?;
    for result in results {
        let (_, artifact, params) = result?;
        artifact.save(&cfg.out_dir, params.as_deref())?;
    }

    let features_manifest = StageManifest::load(features_dir)?;
    let splits_manifest = StageManifest::load(splits_dir)?;
    let mut manifest = StageManifest::new("train", config_hash, cfg.seed);
    manifest.upstream.insert("features".into(), features_manifest.config_hash);
    manifest.upstream.insert("splits".into(), splits_manifest.config_hash);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&cfg.out_dir)?;
    println!("trained {} folds ({})", plans.len(), cfg.model.as_str());
    Ok(())
}

/// Score a stored model artifact on one fold's test rows.
fn score_artifact(
    bundle: &FeatureBundle,
    plan: &SplitPlan,
    artifact: &ModelArtifact,
    params: Option<&Vec<f64>>,
    positive_class: u8,
) -> Result<BTreeMap<String, f64>> {
    let labels = labels_for_task(&bundle.sigs, artifact.task);
    let test_idx = labeled_indices(&plan.test, &labels);
    let y_test = gather_labels(&test_idx, &labels);
    if y_test.is_empty() {
        return Err(CoreError::config("fold has no labeled test rows"));
    }
    let model_task = artifact.task.model_task();

    let scores: Vec<f64> = match artifact.model {
        ModelKind::Logistic | ModelKind::Linear => {
            let pre = artifact
                .preprocess
                .as_ref()
                .ok_or_else(|| CoreError::config("linear artifact lacks preprocessing"))?;
            let blocks = bundle.blocks_for(&pre.mask, pre.imputer.as_ref())?;
            let refs: Vec<&FeatureBlock> = blocks.iter().collect();
            let design = assemble(&refs, &pre.mask)?;
            let mut x_test = design.data.select(Axis(0), &test_idx);
            pre.scaler.apply(&mut x_test)?;
            let model = artifact
                .linear
                .as_ref()
                .ok_or_else(|| CoreError::config("linear artifact lacks weights"))?;
            match model_task {
                Task::Classify => predict_proba(model, x_test.view())?,
                Task::Regress => predict_value(model, x_test.view())?,
            }
        }
        ModelKind::Mlp => {
            let emb = bundle.emb.as_ref().ok_or_else(|| {
                CoreError::MissingArtifact("pooled embedding block (needed for MLP)".into())
            })?;
            let pre = artifact
                .preprocess
                .as_ref()
                .ok_or_else(|| CoreError::config("MLP artifact lacks preprocessing"))?;
            let mut x_test = emb.data.select(Axis(0), &test_idx);
            pre.scaler.apply(&mut x_test)?;
            let cfg = artifact
                .mlp_config
                .ok_or_else(|| CoreError::config("MLP artifact lacks its config"))?;
            let input_dim = artifact
                .input_dim
                .ok_or_else(|| CoreError::config("MLP artifact lacks input_dim"))?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = Mlp::init(cfg, input_dim, &mut rng)?;
            let params = params
                .ok_or_else(|| CoreError::MissingArtifact("MLP parameter tensor file".into()))?;
            if params.len() != model.n_params() {
                return Err(CoreError::dimension("stored MLP parameters have wrong length"));
            }
            model.params.copy_from_slice(params);
            model.predict(x_test.view())?
        }
        ModelKind::Cnn => {
            let tensors = bundle.struct_tensors()?;
            let mut x_test = Array3::zeros((test_idx.len(), CHANNELS, PAIR_POSITIONS));
            for (bi, &ri) in test_idx.iter().enumerate() {
                x_test
                    .index_axis_mut(Axis(0), bi)
                    .assign(&tensors.index_axis(Axis(0), ri));
            }
            let cfg = artifact
                .cnn_config
                .ok_or_else(|| CoreError::config("CNN artifact lacks its config"))?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = Cnn1d::init(cfg, CHANNELS, PAIR_POSITIONS, &mut rng)?;
            let params = params
                .ok_or_else(|| CoreError::MissingArtifact("CNN parameter tensor file".into()))?;
            if params.len() != model.n_params() {
                return Err(CoreError::dimension("stored CNN parameters have wrong length"));
            }
            model.params.copy_from_slice(params);
            if let Some(running) = &artifact.running {
                model.running = running.clone();
            }
            model.predict(x_test.view())?
        }
    };

    match model_task {
        Task::Classify => classification_metrics(&scores, &y_test, positive_class),
        Task::Regress => regression_metrics(&scores, &y_test),
    }
}

/// `eval`: score stored per-fold models and write the aggregated report.
pub fn run_eval(
    cfg: &RunConfig,
    features_dir: &Path,
    splits_dir: &Path,
    models_dir: &Path,
) -> Result<()> {
    let start = Instant::now();
    let bundle = FeatureBundle::load(features_dir)?;
    let plans = load_folds(splits_dir)?;
    let models_manifest = StageManifest::load(models_dir)?;
    let features_manifest = StageManifest::load(features_dir)?;
    if let Some(expected) = models_manifest.upstream.get("features") {
        warn_on_hash_mismatch(expected, &features_manifest.config_hash, "features");
    }

    let mut first_artifact: Option<ModelArtifact> = None;
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (k, plan) in plans.iter().enumerate() {
        let (artifact, params) = ModelArtifact::load(models_dir, k)?;
        let metrics = score_artifact(&bundle, plan, &artifact, params.as_ref(), cfg.positive_class)?;
        for (name, value) in metrics {
            per_metric.entry(name).or_default().push(value);
        }
        if first_artifact.is_none() {
            first_artifact = Some(artifact);
        }
    }
    let artifact = first_artifact.ok_or_else(|| CoreError::config("no folds evaluated"))?;
    let report = EvalReport {
        config_hash: models_manifest.config_hash.clone(),
        rows: vec![ReportRow {
            model: artifact.model.as_str().to_string(),
            features: artifact
                .preprocess
                .as_ref()
                .map(|p| p.mask.to_string())
                .unwrap_or_else(|| "struct-tensor".to_string()),
            split: plans[0].scheme.as_str().to_string(),
            task: artifact.task.as_str().to_string(),
            metrics: FoldReport::from_per_fold(&per_metric)?.metrics,
        }],
    };
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("eval_report.json"), serde_json::to_vec_pretty(&report)?)?;

    let mut manifest = StageManifest::new("eval", models_manifest.config_hash.clone(), cfg.seed);
    manifest.upstream.insert("models".into(), models_manifest.config_hash);
    manifest.upstream.insert("features".into(), features_manifest.config_hash);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&cfg.out_dir)?;
    println!("{}", report.render_table());
    Ok(())
}

/// `ablate`: run the seven-mask modality ablation with a linear classifier.
pub fn run_ablate(cfg: &RunConfig, features_dir: &Path, splits_dir: &Path) -> Result<AblationTable> {
    let start = Instant::now();
    let bundle = FeatureBundle::load(features_dir)?;
    let plans = load_folds(splits_dir)?;
    let labels: Vec<Option<u8>> = labels_for_task(&bundle.sigs, TaskKind::Qc)
        .iter()
        .map(|v| v.map(|x| x as u8))
        .collect();

    let mut blocks: Vec<&FeatureBlock> = vec![&bundle.seq];
    if let Some(b) = &bundle.struct_ {
        blocks.push(b);
    }
    if let Some(b) = &bundle.rmsd {
        blocks.push(b);
    }
    let table = ablation_run(
        &blocks,
        &ablation_masks(),
        &plans,
        &labels,
        LinearConfig::classification_default(),
        cfg.positive_class,
    )?;

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("ablation.json"), serde_json::to_vec_pretty(&table)?)?;
    let mut manifest = StageManifest::new("ablate", cfg.config_hash()?, cfg.seed);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&cfg.out_dir)?;

    for row in &table.rows {
        let auroc = row.report.get("auroc").map(|s| s.mean).unwrap_or(f64::NAN);
        let auprc = row.report.get("auprc").map(|s| s.mean).unwrap_or(f64::NAN);
        println!("{:<18} auroc {:.4}  auprc {:.4}", row.mask.to_string(), auroc, auprc);
    }
    Ok(table)
}

/// `tune`: hyperparameter search on fold 0's train/val partitions.
/// Test rows are never touched.
pub fn run_tune(
    cfg: &RunConfig,
    features_dir: &Path,
    splits_dir: &Path,
    space: Option<&SearchSpace>,
    n_trials: usize,
) -> Result<SearchOutcome> {
    let start = Instant::now();
    let bundle = FeatureBundle::load(features_dir)?;
    let plans = load_folds(splits_dir)?;
    let plan = plans
        .first()
        .ok_or_else(|| CoreError::config("tuning requires at least one fold"))?;
    let outcome = tune_on_fold(&bundle, plan, cfg, space, n_trials)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let mut log = fs::File::create(cfg.out_dir.join("trials.jsonl"))?;
    for trial in &outcome.trials {
        serde_json::to_writer(&mut log, trial)?;
        log.write_all(b"\n")?;
    }
    fs::write(cfg.out_dir.join("best.json"), serde_json::to_vec_pretty(&outcome.best)?)?;
    let mut manifest = StageManifest::new("tune", cfg.config_hash()?, cfg.seed);
    manifest.timings_ms.insert("total".into(), elapsed_ms(start));
    manifest.save(&cfg.out_dir)?;
    println!(
        "best trial #{} score {:.4}: {}",
        outcome.best.index,
        outcome.best.score,
        serde_json::to_string(&outcome.best.params)?
    );
    Ok(outcome)
}

/// Validation-metric objective for one assignment of linear hyperparameters.
fn linear_val_score(
    data: &FoldData,
    task: TaskKind,
    assignment: &Assignment,
    positive_class: u8,
) -> Result<f64> {
    let c = assignment
        .get("inverse_reg_c")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| CoreError::config("assignment lacks inverse_reg_c"))?;
    let penalty = assignment
        .get("penalty")
        .and_then(|v| v.as_str())
        .and_then(Penalty::parse)
        .ok_or_else(|| CoreError::config("assignment lacks penalty"))?;
    let mut cfg = LinearConfig::new(task.model_task(), penalty, c);
    cfg.max_iter = 2000;
    cfg.tol = 1e-5;
    match task.model_task() {
        Task::Classify => {
            let model = fit_logistic(data.x_train.view(), &data.y_train, cfg)?;
            let proba = predict_proba(&model, data.x_val.view())?;
            let labels: Vec<u8> = data.y_val.iter().map(|&v| v as u8).collect();
            let scores: Vec<f64> = if positive_class == 1 {
                proba
            } else {
                proba.iter().map(|p| 1.0 - p).collect()
            };
            auroc(&scores, &labels, positive_class)
        }
        Task::Regress => {
            let model = fit_linear(data.x_train.view(), &data.y_train, cfg)?;
            let pred = predict_value(&model, data.x_val.view())?;
            pearson(&pred, &data.y_val)
        }
    }
}

fn tune_on_fold(
    bundle: &FeatureBundle,
    plan: &SplitPlan,
    cfg: &RunConfig,
    space: Option<&SearchSpace>,
    n_trials: usize,
) -> Result<SearchOutcome> {
    match cfg.model {
        ModelKind::Logistic | ModelKind::Linear => {
            let data = prepare_fold(bundle, plan, &cfg.mask, cfg.task)?;
            if data.y_val.is_empty() {
                return Err(CoreError::config("tuning requires labeled validation rows"));
            }
            let default_space = crate::tuning::linear_grid_space();
            let space = space.unwrap_or(&default_space);
            grid_search(
                space,
                |assignment| linear_val_score(&data, cfg.task, assignment, cfg.positive_class),
                true,
            )
        }
        ModelKind::Cnn => {
            let tensors = bundle.struct_tensors()?;
            let labels = labels_for_task(&bundle.sigs, cfg.task);
            let train_idx = labeled_indices(&plan.train, &labels);
            let val_idx = labeled_indices(&plan.val, &labels);
            if val_idx.is_empty() {
                return Err(CoreError::config("tuning requires labeled validation rows"));
            }
            let gather = |idx: &[usize]| -> Array3<f64> {
                let mut out = Array3::zeros((idx.len(), CHANNELS, PAIR_POSITIONS));
                for (bi, &ri) in idx.iter().enumerate() {
                    out.index_axis_mut(Axis(0), bi)
                        .assign(&tensors.index_axis(Axis(0), ri));
                }
                out
            };
            let x_train = gather(&train_idx);
            let y_train = gather_labels(&train_idx, &labels);
            let x_val = gather(&val_idx);
            let y_val = gather_labels(&val_idx, &labels);
            let default_space = crate::tuning::cnn_search_space();
            let space = space.unwrap_or(&default_space);
            let task = cfg.task;
            let positive = cfg.positive_class;
            random_search(
                space,
                n_trials,
                cfg.seed,
                |assignment| {
                    let cnn_cfg = cnn_config_from(assignment, task, cfg.seed)?;
                    let (model, _) =
                        cnn1d_fit(x_train.view(), &y_train, x_val.view(), &y_val, cnn_cfg)?;
                    let pred = model.predict(x_val.view())?;
                    match task.model_task() {
                        Task::Classify => {
                            let labels: Vec<u8> = y_val.iter().map(|&v| v as u8).collect();
                            let scores: Vec<f64> = if positive == 1 {
                                pred
                            } else {
                                pred.iter().map(|p| 1.0 - p).collect()
                            };
                            auroc(&scores, &labels, positive)
                        }
                        Task::Regress => pearson(&pred, &y_val),
                    }
                },
                true,
            )
        }
        ModelKind::Mlp => Err(CoreError::config(
            "MLP tuning uses the fixed reference grid; tune the linear or CNN models",
        )),
    }
}

fn cnn_config_from(assignment: &Assignment, task: TaskKind, seed: u64) -> Result<CnnConfig> {
    let get_usize = |name: &str| -> Result<usize> {
        assignment
            .get(name)
            .and_then(|v| v.as_usize())
            .ok_or_else(|| CoreError::config(format!("assignment lacks {name}")))
    };
    let get_f64 = |name: &str| -> Result<f64> {
        assignment
            .get(name)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| CoreError::config(format!("assignment lacks {name}")))
    };
    Ok(CnnConfig {
        n_layers: get_usize("n_layers")?,
        rep_dim: get_usize("rep_dim")?,
        expansion: get_f64("expansion")?,
        batch_norm: assignment
            .get("batch_norm")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| CoreError::config("assignment lacks batch_norm"))?,
        lr: get_f64("lr")?,
        batch_size: get_usize("batch_size")?,
        epochs: get_usize("epochs")?,
        seed,
        task: task.model_task(),
    })
}

/// `report`: merge evaluation reports from a directory into one table.
pub fn run_report(reports_dir: &Path, format: &str, force: bool) -> Result<String> {
    let mut rows = Vec::new();
    let mut hashes = std::collections::BTreeSet::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(reports_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.file_name().and_then(|n| n.to_str()) == Some("eval_report.json")
            || path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".eval.json"))
        {
            let report: EvalReport = serde_json::from_slice(&fs::read(&path)?)?;
            hashes.insert(report.config_hash.clone());
            rows.extend(report.rows);
        }
    }
    if rows.is_empty() {
        return Err(CoreError::MissingArtifact(format!(
            "no evaluation reports in {}",
            reports_dir.display()
        )));
    }
    if hashes.len() > 1 && !force {
        return Err(CoreError::config(format!(
            "refusing to mix reports from {} different config hashes (use --force)",
            hashes.len()
        )));
    }
    let merged = EvalReport {
        config_hash: hashes.into_iter().next().unwrap_or_default(),
        rows,
    };
    Ok(match format {
        "tsv" => merged.render_tsv(),
        _ => merged.render_table(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::GenConfig;

    fn tiny_dataset() -> crate::synth::SyntheticDataset {
        generate(&GenConfig {
            n_families: 5,
            per_family: (6, 8),
            seed: 21,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn build_bundle(data: &crate::synth::SyntheticDataset) -> FeatureBundle {
        FeatureBundle::build(&BundleInputs {
            records: &data.records,
            structures: Some(&data.structures),
            biophys: Some(&data.biophys),
            pooled_embeddings: None,
            posmaps: None,
        })
        .unwrap()
    }

    #[test]
    fn bundle_has_expected_shapes() {
        let data = tiny_dataset();
        let bundle = build_bundle(&data);
        let n = bundle.sigs.len();
        assert_eq!(bundle.seq.rows(), n);
        assert_eq!(bundle.seq.cols(), crate::seq::one_hot_dim(bundle.vocab.len()));
        assert_eq!(bundle.struct_.as_ref().unwrap().cols(), FLAT_DIM);
        assert_eq!(bundle.rmsd.as_ref().unwrap().cols(), 2);
        assert_eq!(bundle.bio_rows.as_ref().unwrap().len(), n);
    }

    #[test]
    fn bundle_save_load_round_trip() {
        let data = tiny_dataset();
        let bundle = build_bundle(&data);
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = FeatureBundle::load(dir.path()).unwrap();
        assert_eq!(bundle.sigs, back.sigs);
        assert_eq!(bundle.seq, back.seq);
        assert_eq!(bundle.struct_, back.struct_);
        assert_eq!(bundle.rmsd, back.rmsd);
        assert_eq!(bundle.bio_rows, back.bio_rows);
    }

    #[test]
    fn fold_preparation_is_leak_free_and_scaled() {
        let data = tiny_dataset();
        let bundle = build_bundle(&data);
        let spec = FoldSpec::new(SplitScheme::Signature);
        let plan = spec.split(&bundle.sigs, 3).unwrap();
        let fold = prepare_fold(&bundle, &plan, &ModalityMask::all(), TaskKind::Qc).unwrap();
        assert_eq!(fold.x_train.nrows(), fold.y_train.len());
        // Continuous train columns are z-scored: mean ~0.
        let cols = fold.x_train.ncols();
        let seq_cols = bundle.seq.cols();
        for j in seq_cols..cols {
            let mean: f64 = fold.x_train.column(j).sum() / fold.x_train.nrows() as f64;
            assert!(mean.abs() <= 1e-9, "column {j} mean {mean}");
        }
        assert!(fold.preprocess.imputer.is_some());
    }

    #[test]
    fn linear_fold_eval_produces_metrics() {
        let data = tiny_dataset();
        let bundle = build_bundle(&data);
        let spec_split = FoldSpec::new(SplitScheme::Signature);
        let plans = crate::splits::make_folds(&spec_split, &bundle.sigs, 2, 5).unwrap();
        let mut spec = ModelSpec::new(ModelKind::Logistic, ModalityMask::all(), TaskKind::Qc);
        spec.linear.max_iter = 300;
        spec.linear.tol = 1e-4;
        let report = eval_across_folds(&bundle, &plans, &spec, TaskKind::Qc, 0).unwrap();
        let auroc = report.get("auroc").unwrap();
        assert_eq!(auroc.folds.len(), 2);
        for v in &auroc.folds {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn stage_chain_runs_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let gen_cfg = GenConfig {
            n_families: 5,
            per_family: (6, 8),
            seed: 33,
            ..GenConfig::default()
        };
        run_gen(&gen_cfg, &data_dir, Some(8)).unwrap();

        let features_dir = tmp.path().join("features");
        let mut cfg = RunConfig {
            records: Some(data_dir.join("records.csv")),
            structures: Some(data_dir.join("structures")),
            biophys: Some(data_dir.join("biophys.csv")),
            embeddings: Some(data_dir.join("embeddings")),
            out_dir: features_dir.clone(),
            n_folds: 2,
            seed: 4,
            ..RunConfig::default()
        };
        run_featurize(&cfg).unwrap();

        let splits_dir = tmp.path().join("splits");
        cfg.out_dir = splits_dir.clone();
        run_split(&cfg, &features_dir).unwrap();

        let models_dir = tmp.path().join("models");
        cfg.out_dir = models_dir.clone();
        run_train(&cfg, &features_dir, &splits_dir).unwrap();

        let reports_dir = tmp.path().join("reports");
        cfg.out_dir = reports_dir.clone();
        run_eval(&cfg, &features_dir, &splits_dir, &models_dir).unwrap();

        let table = run_report(&reports_dir, "table", false).unwrap();
        assert!(table.contains("logistic"));
        let tsv = run_report(&reports_dir, "tsv", false).unwrap();
        assert!(tsv.contains("auroc"));
    }

    #[test]
    fn eval_without_models_names_the_missing_artifact() {
        let tmp = tempfile::tempdir().unwrap();
        let err = ModelArtifact::load(tmp.path(), 0).unwrap_err();
        match err {
            CoreError::MissingArtifact(what) => assert!(what.contains("fold_00")),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
