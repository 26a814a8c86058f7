//! Command implementations behind the `tdmtl` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tdmtl_core::dataset::{self, Cohort, Encoder, RawTable, TableSchema};
use tdmtl_core::metrics::{self, CalibrationCurve, ScoredSet};
use tdmtl_core::pipeline::{
    self, BenchmarkReport, CellCurves, FoldResult, ModelArtifact, PipelineConfig,
};
use tdmtl_core::synth::{self, SynthConfig};

pub const OUT_DIR_ENV: &str = "TDMTL_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "tdmtl-out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] tdmtl_core::Error),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use tdmtl_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "tdmtl",
    version,
    about = "Tree-distilled multi-task learning on tabular cohorts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort (data file, schema file, manifest)
    Synth(CommonArgs),
    /// Fit the distilled model on all rows and write the model artifact
    Train(CommonArgs),
    /// K-fold comparison of all models; writes report and curve files
    Benchmark(CommonArgs),
    /// Score a data file with a trained artifact
    Predict(PredictArgs),
    /// ROC, PR and calibration curves of a trained artifact on labelled data
    ExportCurves(PredictArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR", env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Number of folds
    #[arg(long)]
    pub k: Option<usize>,
    /// Features kept per task ensemble
    #[arg(long = "top-k")]
    pub top_k: Option<usize>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model artifact (default: `model.json` in the output directory)
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Data file (default: the config's data path)
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub path: Option<PathBuf>,
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    pub out_dir: Option<PathBuf>,
    /// Expected label columns; checked against the schema when present.
    pub tasks: Vec<String>,
    pub data: DataPaths,
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            k: 4,
            out_dir: None,
            tasks: Vec::new(),
            data: DataPaths::default(),
            pipeline: PipelineConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(CliError::Config(format!("k must be >= 2, got {}", self.k)));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(t) = self.tasks.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(CliError::Config(format!("task `{t}` listed twice")));
        }
        self.pipeline.gbdt.validate()?;
        self.pipeline.embedding.validate()?;
        Ok(())
    }
}

/// Resolved settings for one command invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl Context {
    pub fn load(args: &CommonArgs) -> Result<Self> {
        let text = fs::read_to_string(&args.config)
            .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
        let mut config = RunConfig::from_toml_str(&text)?;
        if let Some(k) = args.k {
            config.k = k;
        }
        if let Some(top_k) = args.top_k {
            config.pipeline.top_k = Some(top_k);
        }
        config.validate()?;
        let base_dir = args
            .config
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let out_dir = match (&args.out, &config.out_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => base_dir.join(o),
            (None, None) => PathBuf::from(DEFAULT_OUT_DIR),
        };
        if args.jobs == Some(0) {
            return Err(CliError::Config("--jobs must be >= 1".into()));
        }
        Ok(Context {
            config,
            base_dir,
            out_dir,
            seed: args.seed,
            jobs: args.jobs,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.config.seed)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        match &self.config.data.path {
            Some(p) => Ok(self.resolve(p)),
            None => Err(CliError::Config("[data] path is not set".into())),
        }
    }

    pub fn schema_path(&self) -> Result<PathBuf> {
        match &self.config.data.schema {
            Some(p) => Ok(self.resolve(p)),
            None => Err(CliError::Config("[data] schema is not set".into())),
        }
    }

    fn ensure_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))
    }

    /// Load, encode and impute the configured data file.
    pub fn load_cohort(&self) -> Result<(TableSchema, Cohort, Encoder)> {
        let schema = TableSchema::load(self.schema_path()?)?;
        if !self.config.tasks.is_empty() && self.config.tasks != schema.labels {
            return Err(CliError::Config(format!(
                "config tasks {:?} do not match schema labels {:?}",
                self.config.tasks, schema.labels
            )));
        }
        let raw = dataset::load_table(self.data_path()?, &schema)?;
        if raw.labels.is_none() {
            return Err(tdmtl_core::Error::Schema("data file has no label columns".into()).into());
        }
        let (cohort, encoder) = dataset::encode(&raw, &schema)?;
        Ok((schema, dataset::impute_zero(cohort), encoder))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            b = b.num_threads(j);
        }
        b.build().map_err(|e| CliError::Config(e.to_string()))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub rows: usize,
    pub positives: Vec<usize>,
    pub both: usize,
    pub data: String,
    pub schema: String,
    pub config: SynthConfig,
}

pub const SYNTH_DATA: &str = "cohort.csv";
pub const SYNTH_SCHEMA: &str = "schema.toml";

pub fn cmd_synth(ctx: &Context) -> Result<SynthManifest> {
    let mut cfg = ctx.config.synth.clone();
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let data = synth::generate(&cfg)?;
    ctx.ensure_out_dir()?;
    let labels = data.table.labels.as_ref().expect("synth data is labelled");
    let positives = (0..2)
        .map(|j| labels.iter().filter(|l| l[j] == 1).count())
        .collect();
    dataset::write_table(ctx.out_dir.join(SYNTH_DATA), &data.schema, &data.table)?;
    data.schema.save(ctx.out_dir.join(SYNTH_SCHEMA))?;
    let manifest = SynthManifest {
        seed: cfg.seed,
        rows: data.table.len(),
        positives,
        both: cfg.n_both(),
        data: SYNTH_DATA.into(),
        schema: SYNTH_SCHEMA.into(),
        config: cfg,
    };
    write_file(&ctx.out_dir.join("manifest.json"), to_json(&manifest))?;
    Ok(manifest)
}

pub fn cmd_train(ctx: &Context) -> Result<ModelArtifact> {
    let (schema, cohort, encoder) = ctx.load_cohort()?;
    let artifact =
        ModelArtifact::train(&schema, encoder, &cohort, &ctx.config.pipeline, ctx.seed())?;
    ctx.ensure_out_dir()?;
    artifact.save(ctx.out_dir.join("model.json"))?;
    write_file(
        &ctx.out_dir.join("history.json"),
        to_json(&artifact.history),
    )?;
    Ok(artifact)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldTiming {
    pub fold: usize,
    pub seconds: f64,
}

pub fn write_curves(dir: &Path, stem: &str, curves: &CellCurves) -> Result<()> {
    let mut roc = String::from("fpr,tpr\n");
    for (x, y) in &curves.roc {
        roc.push_str(&format!("{x},{y}\n"));
    }
    write_file(&dir.join(format!("{stem}_roc.csv")), roc)?;
    let mut pr = String::from("recall,precision\n");
    for (x, y) in &curves.pr {
        pr.push_str(&format!("{x},{y}\n"));
    }
    write_file(&dir.join(format!("{stem}_pr.csv")), pr)?;
    write_file(
        &dir.join(format!("{stem}_calibration.csv")),
        calibration_csv(&curves.calibration),
    )
}

fn calibration_csv(curve: &CalibrationCurve) -> String {
    let mut out = String::from("bin,mean_predicted,observed_fraction,count\n");
    for (i, b) in curve.bins.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            b.mean_predicted, b.observed_fraction, b.count
        ));
    }
    out
}

/// Numeric rows of a curve file written by this tool (header skipped).
pub fn read_curve_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .skip(1)
        .map(|line| {
            line.split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|e| {
                        CliError::Core(tdmtl_core::Error::Format {
                            what: "curve file",
                            message: format!("{}: {e}", path.display()),
                        })
                    })
                })
                .collect()
        })
        .collect()
}

pub struct BenchmarkOutput {
    pub report: BenchmarkReport,
    pub timings: Vec<FoldTiming>,
}

pub fn cmd_benchmark(ctx: &Context) -> Result<BenchmarkOutput> {
    let (_, cohort, _) = ctx.load_cohort()?;
    let seed = ctx.seed();
    let folds = dataset::kfold_split(&cohort.y, ctx.config.k, seed)?;
    let pipeline_cfg = &ctx.config.pipeline;
    let results: Vec<(FoldResult, f64)> = ctx.pool()?.install(|| {
        folds
            .par_iter()
            .map(|f| {
                let t = Instant::now();
                let r = pipeline::evaluate_fold(&cohort, f, pipeline_cfg, seed)?;
                Ok((r, t.elapsed().as_secs_f64()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let timings = results
        .iter()
        .map(|(r, s)| FoldTiming {
            fold: r.fold_index,
            seconds: *s,
        })
        .collect();
    let fold_results: Vec<FoldResult> = results.into_iter().map(|(r, _)| r).collect();

    ctx.ensure_out_dir()?;
    let curve_dir = ctx.out_dir.join("curves");
    fs::create_dir_all(&curve_dir).map_err(io_err(&curve_dir))?;
    for f in &fold_results {
        for c in &f.cells {
            if let Some(curves) = &c.curves {
                write_curves(
                    &curve_dir,
                    &format!("fold{}_{}_{}", f.fold_index, c.model, c.task),
                    curves,
                )?;
            }
        }
    }
    let report = pipeline::assemble_report(&cohort, pipeline_cfg, seed, fold_results)?;
    write_file(&ctx.out_dir.join("report.json"), to_json(&report))?;
    write_file(&ctx.out_dir.join("report.txt"), report.render_table())?;
    write_file(&ctx.out_dir.join("timings.json"), to_json(&timings))?;
    Ok(BenchmarkOutput { report, timings })
}

pub fn load_report(path: &Path) -> Result<BenchmarkReport> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(tdmtl_core::Error::Format {
            what: "benchmark report",
            message: e.to_string(),
        })
    })
}

fn load_for_scoring(ctx: &Context, args: &PredictArgs) -> Result<(ModelArtifact, RawTable)> {
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| ctx.out_dir.join("model.json"));
    let artifact = ModelArtifact::load(&model_path)?;
    let data_path = match &args.data {
        Some(p) => p.clone(),
        None => ctx.data_path()?,
    };
    let raw = dataset::load_table(&data_path, &artifact.schema)?;
    Ok((artifact, raw))
}

pub fn cmd_predict(ctx: &Context, args: &PredictArgs) -> Result<PathBuf> {
    let (artifact, raw) = load_for_scoring(ctx, args)?;
    let probs = artifact.predict_table(&raw)?;
    let mut out = String::from(artifact.schema.id_column.as_str());
    for t in artifact.task_names() {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for (id, row) in raw.ids.iter().zip(probs.rows()) {
        out.push_str(id);
        for p in row {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    ctx.ensure_out_dir()?;
    let path = ctx.out_dir.join("predictions.csv");
    write_file(&path, out)?;
    Ok(path)
}

pub fn cmd_export_curves(ctx: &Context, args: &PredictArgs) -> Result<Vec<PathBuf>> {
    let (artifact, raw) = load_for_scoring(ctx, args)?;
    let labels = raw.labels.as_ref().ok_or_else(|| {
        tdmtl_core::Error::Schema("curves need label columns in the data file".into())
    })?;
    let probs = artifact.predict_table(&raw)?;
    ctx.ensure_out_dir()?;
    let dir = ctx.out_dir.join("curves");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = Vec::new();
    for (j, task) in artifact.task_names().iter().enumerate() {
        let y: Vec<u8> = labels.iter().map(|l| l[j]).collect();
        let set = ScoredSet::new(probs.column(j).to_vec(), y)?;
        let curves = CellCurves {
            roc: metrics::roc_points(&set)?,
            pr: metrics::pr_points(&set)?,
            calibration: metrics::calibration_curve(&set, pipeline::CALIBRATION_BINS)?,
        };
        let stem = format!("model_{task}");
        write_curves(&dir, &stem, &curves)?;
        written.push(dir.join(format!("{stem}_roc.csv")));
    }
    Ok(written)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let ctx = Context::load(a)?;
            let m = cmd_synth(&ctx)?;
            println!("wrote {} rows to {}", m.rows, ctx.out_dir.display());
        }
        Command::Train(a) => {
            let ctx = Context::load(a)?;
            let art = cmd_train(&ctx)?;
            println!(
                "trained on {} trunk inputs; final loss {:.6}",
                art.model.feature_union.len(),
                art.history.total.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Benchmark(a) => {
            let ctx = Context::load(a)?;
            let out = cmd_benchmark(&ctx)?;
            print!("{}", out.report.render_table());
        }
        Command::Predict(a) => {
            let ctx = Context::load(&a.common)?;
            let path = cmd_predict(&ctx, a)?;
            println!("wrote {}", path.display());
        }
        Command::ExportCurves(a) => {
            let ctx = Context::load(&a.common)?;
            for p in cmd_export_curves(&ctx, a)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::from_toml_str(
            "seed = 7\n[pipeline]\ntop_k = 12\n[pipeline.mtl]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.pipeline.top_k, Some(12));
        assert_eq!(cfg.pipeline.mtl.epochs, 3);
        assert_eq!(cfg.pipeline.mtl.hidden, 100);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_configs() {
        assert!(RunConfig::from_toml_str("k = 1")
            .unwrap()
            .validate()
            .is_err());
        assert!(RunConfig::from_toml_str("tasks = [\"a\", \"a\"]")
            .unwrap()
            .validate()
            .is_err());
        assert!(RunConfig::from_toml_str("bogus = 3").is_err());
        let neg = RunConfig::from_toml_str("[synth]\nn_negative = -5");
        assert!(neg.is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        assert_eq!(
            CliError::Core(tdmtl_core::Error::NonFinite { epoch: 2 }).exit_code(),
            3
        );
        assert_eq!(
            CliError::Core(tdmtl_core::Error::SingleClass).exit_code(),
            2
        );
    }
}
