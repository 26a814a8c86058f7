//! End-to-end fitting and K-fold evaluation.
//!
//! `fit_codmtl` chains per-task boosting, leaf-embedding fitting and the
//! distilled multi-task network. `evaluate_fold` runs every model on one
//! fold; `assemble_report` aggregates fold results.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{Cell, Cohort, Encoder, FoldSplit, RawTable, Role, TableSchema};
use crate::distill::{self, DistillTarget, EmbeddingConfig, LeafEmbeddingModel, OneHotMatrix};
use crate::error::{Error, Result};
use crate::gbdt::{self, GbdtConfig, GbdtModel};
use crate::metrics::{self, CalibrationCurve, ScoredSet};
use crate::mtl::{self, BaselineKind, MtlConfig, MtlModel, TrainHistory};

pub const MODELS: [&str; 5] = ["logreg", "gbdt", "mlp_single", "mtl_plain", "codmtl"];
pub const CALIBRATION_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub gbdt: GbdtConfig,
    pub embedding: EmbeddingConfig,
    pub mtl: MtlConfig,
    /// Features kept per task ensemble (by split gain), capped at the column
    /// count; `None` keeps every feature with positive gain.
    pub top_k: Option<usize>,
    /// Feed every column to the trunk instead of the tree-selected union.
    pub full_feature_input: bool,
    /// Restrict the trunk to recipient-side columns.
    pub recipient_only: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gbdt: GbdtConfig::default(),
            embedding: EmbeddingConfig::default(),
            mtl: MtlConfig::default(),
            top_k: Some(64),
            full_feature_input: false,
            recipient_only: false,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one component of one fold; independent of scheduling order.
pub fn derive_seed(base: u64, fold: usize, component: u64) -> u64 {
    splitmix(splitmix(base ^ splitmix(fold as u64)) ^ component)
}

const NET_COMPONENT: u64 = 1;
const GBDT_COMPONENT: u64 = 100;
const EMBED_COMPONENT: u64 = 200;

/// Seeds used for a fold: shared by all neural models so the reduction
/// properties hold inside a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSeeds {
    pub net: u64,
    pub base: u64,
    pub fold: usize,
}

impl FoldSeeds {
    pub fn new(base: u64, fold: usize) -> Self {
        FoldSeeds {
            net: derive_seed(base, fold, NET_COMPONENT),
            base,
            fold,
        }
    }

    pub fn gbdt(&self, task: usize) -> u64 {
        derive_seed(self.base, self.fold, GBDT_COMPONENT + task as u64)
    }

    pub fn embedding(&self, task: usize) -> u64 {
        derive_seed(self.base, self.fold, EMBED_COMPONENT + task as u64)
    }
}

/// Per-task ensembles and their distillation artifacts.
#[derive(Debug, Clone)]
pub struct TaskTeachers {
    pub gbdts: Vec<GbdtModel>,
    pub embeddings: Vec<LeafEmbeddingModel>,
    pub targets: Vec<DistillTarget>,
    /// (initial, final) soft-target loss of each embedding fit.
    pub embedding_loss: Vec<(f64, f64)>,
}

pub fn train_task_gbdts(
    cohort: &Cohort,
    rows: &[usize],
    config: &GbdtConfig,
    seeds: &FoldSeeds,
) -> Result<Vec<GbdtModel>> {
    let x = cohort.select_x(rows);
    (0..cohort.n_tasks())
        .map(|j| {
            let y: Vec<u8> = rows.iter().map(|&r| cohort.y[[r, j]]).collect();
            let cfg = GbdtConfig {
                seed: seeds.gbdt(j),
                ..*config
            };
            gbdt::train_gbdt(&x, &y, &cfg)
        })
        .collect()
}

/// Fit a leaf embedding per ensemble on `rows` and derive targets.
pub fn distill_teachers(
    cohort: &Cohort,
    rows: &[usize],
    gbdts: Vec<GbdtModel>,
    config: &EmbeddingConfig,
    seeds: &FoldSeeds,
) -> Result<TaskTeachers> {
    let x = cohort.select_x(rows);
    let mut teachers = TaskTeachers {
        gbdts: Vec::new(),
        embeddings: Vec::new(),
        targets: Vec::new(),
        embedding_loss: Vec::new(),
    };
    for (j, g) in gbdts.into_iter().enumerate() {
        let onehots = OneHotMatrix::from_model(&g, &x)?;
        let q = distill::soft_targets(&g, &x)?;
        let cfg = EmbeddingConfig {
            seed: seeds.embedding(j),
            ..*config
        };
        let fit = distill::train_leaf_embedding(&onehots, &g.leaf_counts, &q, &cfg)?;
        teachers
            .targets
            .push(DistillTarget::from_model(&fit.model, &onehots)?);
        teachers
            .embedding_loss
            .push((fit.initial_loss, fit.final_loss));
        teachers.embeddings.push(fit.model);
        teachers.gbdts.push(g);
    }
    Ok(teachers)
}

/// Untrained distilled model for the given teachers.
pub fn build_student(
    cohort: &Cohort,
    teachers: &TaskTeachers,
    config: &PipelineConfig,
    seed: u64,
) -> Result<MtlModel> {
    let mtl_cfg = MtlConfig {
        seed,
        ..config.mtl.clone()
    };
    let allowed = config
        .recipient_only
        .then(|| cohort.schema.indices_with_role(Role::Recipient));
    if config.full_feature_input {
        mtl_cfg.validate(teachers.gbdts.len())?;
        let union: Vec<usize> = match &allowed {
            Some(a) => a.clone(),
            None => (0..cohort.n_features()).collect(),
        };
        let dims: Vec<usize> = teachers
            .embeddings
            .iter()
            .map(LeafEmbeddingModel::dim)
            .collect();
        return MtlModel::with_projections(
            cohort.n_features(),
            union,
            teachers.gbdts.len(),
            mtl_cfg.hidden,
            &dims,
            seed,
        );
    }
    mtl::build_codmtl(
        &teachers.gbdts,
        &teachers.embeddings,
        &mtl_cfg,
        config.top_k.map(|k| k.min(cohort.n_features())),
        allowed.as_deref(),
    )
}

#[derive(Debug, Clone)]
pub struct CodMtlFit {
    pub teachers: TaskTeachers,
    pub model: MtlModel,
    pub history: TrainHistory,
}

/// Full distilled pipeline on `rows`. Pass pre-trained ensembles to reuse
/// them (they must have been fit on the same rows).
pub fn fit_codmtl(
    cohort: &Cohort,
    rows: &[usize],
    config: &PipelineConfig,
    seeds: &FoldSeeds,
    gbdts: Option<Vec<GbdtModel>>,
) -> Result<CodMtlFit> {
    let gbdts = match gbdts {
        Some(g) => g,
        None => train_task_gbdts(cohort, rows, &config.gbdt, seeds)?,
    };
    let teachers = distill_teachers(cohort, rows, gbdts, &config.embedding, seeds)?;
    let mut model = build_student(cohort, &teachers, config, seeds.net)?;
    let mtl_cfg = MtlConfig {
        seed: seeds.net,
        ..config.mtl.clone()
    };
    let history = mtl::train_mtl(
        &mut model,
        &cohort.x,
        &cohort.y,
        rows,
        &teachers.targets,
        &mtl_cfg,
    )?;
    Ok(CodMtlFit {
        teachers,
        model,
        history,
    })
}

/// Curve points for one (model, task) cell on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCurves {
    pub roc: Vec<(f64, f64)>,
    pub pr: Vec<(f64, f64)>,
    pub calibration: CalibrationCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub task: String,
    /// `None` when the test fold has a single class for this task.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub calibration_slope: Option<f64>,
    pub calibration_intercept: Option<f64>,
    #[serde(skip)]
    pub curves: Option<CellCurves>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub cells: Vec<CellResult>,
    /// Pearson correlation of distilled logits with ensemble margins on the
    /// test rows, per task.
    pub fidelity: Vec<Option<f64>>,
    /// Size of the trunk input of the distilled model.
    pub trunk_inputs: usize,
    pub codmtl_final_loss: f64,
}

fn score_cell(model: &str, task: &str, scores: Vec<f64>, labels: Vec<u8>) -> Result<CellResult> {
    let set = ScoredSet::new(scores, labels)?;
    let mut cell = CellResult {
        model: model.to_string(),
        task: task.to_string(),
        auroc: None,
        auprc: None,
        calibration_slope: None,
        calibration_intercept: None,
        curves: None,
    };
    if set.positives() == 0 || set.negatives() == 0 {
        return Ok(cell);
    }
    cell.auroc = Some(metrics::auroc(&set)?);
    cell.auprc = Some(metrics::auprc(&set)?);
    let calibration = metrics::calibration_curve(&set, CALIBRATION_BINS)?;
    if let Ok((slope, intercept)) = metrics::calibration_slope_intercept(&calibration) {
        cell.calibration_slope = Some(slope);
        cell.calibration_intercept = Some(intercept);
    }
    cell.curves = Some(CellCurves {
        roc: metrics::roc_points(&set)?,
        pr: metrics::pr_points(&set)?,
        calibration,
    });
    Ok(cell)
}

/// Train all five models on the fold's training rows and score the test
/// rows.
pub fn evaluate_fold(
    cohort: &Cohort,
    fold: &FoldSplit,
    config: &PipelineConfig,
    base_seed: u64,
) -> Result<FoldResult> {
    let seeds = FoldSeeds::new(base_seed, fold.fold_index);
    let m = cohort.n_tasks();
    let test_x = cohort.select_x(&fold.test_rows);
    let test_y = cohort.select_y(&fold.test_rows);
    let net_cfg = MtlConfig {
        seed: seeds.net,
        ..config.mtl.clone()
    };
    let mut probs: Vec<(&str, Array2<f64>)> = Vec::new();

    let logreg = mtl::train_baseline(BaselineKind::Logreg, cohort, fold, None, &net_cfg)?;
    probs.push((BaselineKind::Logreg.name(), logreg.predict_proba(test_x.view())?));
    let gbdts = train_task_gbdts(cohort, &fold.train_rows, &config.gbdt, &seeds)?;
    let mut gbdt_p = Array2::zeros((test_x.nrows(), m));
    let mut margins = Vec::with_capacity(m);
    for (j, g) in gbdts.iter().enumerate() {
        let mg = g.predict_margins(&test_x)?;
        gbdt_p
            .column_mut(j)
            .iter_mut()
            .zip(&mg)
            .for_each(|(d, &v)| *d = crate::nn::sigmoid(v));
        margins.push(mg);
    }
    probs.push(("gbdt", gbdt_p));
    for kind in [BaselineKind::MlpSingle, BaselineKind::MtlPlain] {
        let b = mtl::train_baseline(kind, cohort, fold, None, &net_cfg)?;
        probs.push((kind.name(), b.predict_proba(test_x.view())?));
    }
    let fit = fit_codmtl(cohort, &fold.train_rows, config, &seeds, Some(gbdts))?;
    let logits = fit.model.logits(test_x.view())?;
    probs.push(("codmtl", logits.mapv(crate::nn::sigmoid)));

    let mut cells = Vec::with_capacity(MODELS.len() * m);
    for (name, p) in &probs {
        for j in 0..m {
            let labels = test_y.column(j).to_vec();
            cells.push(score_cell(
                name,
                &cohort.label_names[j],
                p.column(j).to_vec(),
                labels,
            )?);
        }
    }
    let fidelity = (0..m)
        .map(|j| metrics::pearson(&logits.column(j).to_vec(), &margins[j]).ok())
        .collect();
    Ok(FoldResult {
        fold_index: fold.fold_index,
        n_train: fold.train_rows.len(),
        n_test: fold.test_rows.len(),
        cells,
        fidelity,
        trunk_inputs: fit.model.feature_union.len(),
        codmtl_final_loss: *fit.history.total.last().expect("epochs >= 1"),
    })
}

/// Cross-fold summary of one (model, task, metric) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model: String,
    pub task: String,
    pub metric: String,
    pub per_fold: Vec<Option<f64>>,
    /// Over valid folds only.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub k: usize,
    pub n_rows: usize,
    pub n_features: usize,
    pub tasks: Vec<String>,
    pub config: PipelineConfig,
    pub summary: Vec<CellSummary>,
    pub folds: Vec<FoldResult>,
}

impl BenchmarkReport {
    pub fn cell(&self, model: &str, task: &str, metric: &str) -> Option<&CellSummary> {
        self.summary
            .iter()
            .find(|c| c.model == model && c.task == task && c.metric == metric)
    }

    pub fn mean(&self, model: &str, task: &str, metric: &str) -> Option<f64> {
        self.cell(model, task, metric).and_then(|c| c.mean)
    }

    /// Aligned text table: one row per model, mean ± std per task and
    /// metric.
    pub fn render_table(&self) -> String {
        let mut header = format!("{:<12}", "model");
        for t in &self.tasks {
            header.push_str(&format!(
                " {:>19} {:>19}",
                format!("{t} AUROC"),
                format!("{t} AUPRC")
            ));
        }
        let mut out = header.trim_end().to_string();
        out.push('\n');
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        for model in MODELS {
            let mut line = format!("{model:<12}");
            for t in &self.tasks {
                for metric in ["auroc", "auprc"] {
                    let text = match self.cell(model, t, metric) {
                        Some(CellSummary {
                            mean: Some(m),
                            std: Some(s),
                            valid,
                            ..
                        }) => {
                            format!("{m:.3} ± {s:.3}{}", if *valid { "" } else { "*" })
                        }
                        _ => "invalid".to_string(),
                    };
                    line.push_str(&format!(" {text:>19}"));
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

/// Aggregate fold results (in any order) into a report.
pub fn assemble_report(
    cohort: &Cohort,
    config: &PipelineConfig,
    seed: u64,
    mut folds: Vec<FoldResult>,
) -> Result<BenchmarkReport> {
    folds.sort_by_key(|f| f.fold_index);
    let mut summary = Vec::new();
    for model in MODELS {
        for task in &cohort.label_names {
            for metric in ["auroc", "auprc"] {
                let per_fold: Vec<Option<f64>> = folds
                    .iter()
                    .map(|f| {
                        f.cells
                            .iter()
                            .find(|c| c.model == model && &c.task == task)
                            .and_then(|c| if metric == "auroc" { c.auroc } else { c.auprc })
                    })
                    .collect();
                let valid_values: Vec<f64> = per_fold.iter().flatten().copied().collect();
                let (mean, std) = match metrics::mean_std(&valid_values) {
                    Ok((m, s)) => (Some(m), Some(s)),
                    Err(_) => (None, None),
                };
                summary.push(CellSummary {
                    model: model.to_string(),
                    task: task.clone(),
                    metric: metric.to_string(),
                    valid: valid_values.len() == per_fold.len(),
                    per_fold,
                    mean,
                    std,
                });
            }
        }
    }
    Ok(BenchmarkReport {
        seed,
        k: folds.len(),
        n_rows: cohort.n_rows(),
        n_features: cohort.n_features(),
        tasks: cohort.label_names.clone(),
        config: config.clone(),
        summary,
        folds,
    })
}

/// Sequential K-fold benchmark.
pub fn run_benchmark(
    cohort: &Cohort,
    config: &PipelineConfig,
    k: usize,
    seed: u64,
) -> Result<BenchmarkReport> {
    let folds = crate::dataset::kfold_split(&cohort.y, k, seed)?;
    let results = folds
        .iter()
        .map(|f| evaluate_fold(cohort, f, config, seed))
        .collect::<Result<Vec<_>>>()?;
    assemble_report(cohort, config, seed, results)
}

pub const ARTIFACT_FORMAT: u32 = 1;

/// Everything needed to score raw rows: schema, code maps, teachers and the
/// trained distilled network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: u32,
    pub schema: TableSchema,
    pub encoder: Encoder,
    pub gbdts: Vec<GbdtModel>,
    pub embeddings: Vec<LeafEmbeddingModel>,
    pub model: MtlModel,
    pub config: PipelineConfig,
    pub seed: u64,
    pub history: TrainHistory,
}

impl ModelArtifact {
    /// Fit the distilled pipeline on every row of the cohort.
    pub fn train(
        schema: &TableSchema,
        encoder: Encoder,
        cohort: &Cohort,
        config: &PipelineConfig,
        seed: u64,
    ) -> Result<Self> {
        let rows: Vec<usize> = (0..cohort.n_rows()).collect();
        let seeds = FoldSeeds::new(seed, 0);
        let fit = fit_codmtl(cohort, &rows, config, &seeds, None)?;
        Ok(ModelArtifact {
            format: ARTIFACT_FORMAT,
            schema: schema.clone(),
            encoder,
            gbdts: fit.teachers.gbdts,
            embeddings: fit.teachers.embeddings,
            model: fit.model,
            config: config.clone(),
            seed,
            history: fit.history,
        })
    }

    pub fn task_names(&self) -> &[String] {
        &self.schema.labels
    }

    fn encode_row(&self, row: &[Cell]) -> Result<Vec<f64>> {
        let mut x = self.encoder.transform_row(row)?;
        for v in &mut x {
            if v.is_nan() {
                *v = 0.0;
            }
        }
        Ok(x)
    }

    /// Probability for every task on one raw row.
    pub fn predict_all(&self, row: &[Cell]) -> Result<Vec<f64>> {
        self.model.forward_all(&self.encode_row(row)?)
    }

    /// Probabilities (rows × tasks) for a raw table.
    pub fn predict_table(&self, table: &RawTable) -> Result<Array2<f64>> {
        let width = self.encoder.schema.len();
        let mut x = Array2::zeros((table.len(), width));
        for (mut dst, row) in x.axis_iter_mut(Axis(0)).zip(&table.rows) {
            let enc = self.encode_row(row)?;
            dst.iter_mut().zip(enc).for_each(|(d, v)| *d = v);
        }
        self.model.predict_proba(x.view())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "model artifact",
            message: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: ModelArtifact = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "model artifact",
            message: e.to_string(),
        })?;
        if a.format != ARTIFACT_FORMAT {
            return Err(Error::Format {
                what: "model artifact",
                message: format!("unsupported format version {}", a.format),
            });
        }
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            gbdt: GbdtConfig {
                num_trees: 8,
                max_leaves: 4,
                min_samples_leaf: 5,
                ..Default::default()
            },
            embedding: EmbeddingConfig {
                dim: 4,
                hidden: 8,
                epochs: 3,
                ..Default::default()
            },
            mtl: MtlConfig {
                epochs: 3,
                hidden: 8,
                ..Default::default()
            },
            top_k: Some(5),
            ..Default::default()
        }
    }

    fn tiny_data() -> synth::SynthData {
        synth::generate(&SynthConfig {
            n_task1_pos: 80,
            n_task2_pos: 70,
            n_negative: 50,
            n_features: 20,
            n_informative_shared: 3,
            n_informative_per_task: 2,
            signal_strength: 1.5,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn derived_seeds_differ_by_fold_and_component() {
        let a = FoldSeeds::new(42, 0);
        let b = FoldSeeds::new(42, 1);
        assert_ne!(a.net, b.net);
        assert_ne!(a.gbdt(0), a.gbdt(1));
        assert_ne!(a.gbdt(0), a.embedding(0));
        assert_eq!(a, FoldSeeds::new(42, 0));
    }

    #[test]
    fn benchmark_has_every_cell() {
        let (cohort, _) = tiny_data().cohort().unwrap();
        let report = run_benchmark(&cohort, &tiny_config(), 2, 1).unwrap();
        assert_eq!(report.summary.len(), MODELS.len() * 2 * 2);
        for c in &report.summary {
            assert_eq!(c.per_fold.len(), 2);
            let vals: Vec<f64> = c.per_fold.iter().flatten().copied().collect();
            let (m, s) = metrics::mean_std(&vals).unwrap();
            assert_eq!(c.mean, Some(m));
            assert_eq!(c.std, Some(s));
        }
        let table = report.render_table();
        assert_eq!(table.lines().count(), 2 + MODELS.len());
    }

    #[test]
    fn artifact_round_trip() {
        let data = tiny_data();
        let (cohort, encoder) = data.cohort().unwrap();
        let art = ModelArtifact::train(&data.schema, encoder, &cohort, &tiny_config(), 3).unwrap();
        assert_eq!(art.history.len(), 3);
        let back = ModelArtifact::from_json(&art.to_json().unwrap()).unwrap();
        let p1 = art.predict_table(&data.table).unwrap();
        let p2 = back.predict_table(&data.table).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let row = &data.table.rows[0];
        let all = art.predict_all(row).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all, p1.row(0).to_vec());
    }

    #[test]
    fn full_feature_and_recipient_options() {
        let (cohort, _) = tiny_data().cohort().unwrap();
        let rows: Vec<usize> = (0..cohort.n_rows()).collect();
        let seeds = FoldSeeds::new(0, 0);
        let full = PipelineConfig {
            full_feature_input: true,
            ..tiny_config()
        };
        let fit = fit_codmtl(&cohort, &rows, &full, &seeds, None).unwrap();
        assert_eq!(fit.model.feature_union.len(), cohort.n_features());
        let rec = PipelineConfig {
            full_feature_input: true,
            recipient_only: true,
            ..tiny_config()
        };
        let fit = fit_codmtl(&cohort, &rows, &rec, &seeds, None).unwrap();
        let allowed = cohort.schema.indices_with_role(Role::Recipient);
        assert_eq!(fit.model.feature_union, allowed);
    }
}
