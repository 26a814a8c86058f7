//! Shared-trunk multi-task network with per-task distillation projections
//! and prediction heads, plus the single-task and plain multi-task
//! baselines.
//!
//! The trunk reads the input restricted to `feature_union` and produces a
//! hidden representation shared by every task. Task `j` owns a linear head
//! (logit) and, when distillation is on, a linear projection whose output is
//! matched to that task's leaf embedding. The training objective is
//!
//! ```text
//! Σ_j α_j · (β_j · CE_j + γ_j · MSE_j)
//! ```
//!
//! with `CE_j` the mean binary cross-entropy of head `j` against label `j`
//! and `MSE_j` the mean squared distance between projection `j` and the
//! embedding target.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Cohort, FoldSplit};
use crate::distill::{DistillTarget, LeafEmbeddingModel};
use crate::error::{Error, Result};
use crate::gbdt::GbdtModel;
use crate::nn::{
    self, sigmoid, Activation, AdamW, AdamWConfig, Layer, LayerGrad, Net, NetGrads, NetSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtlConfig {
    /// Per-task weights; a missing entry means 1.0.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        MtlConfig {
            alpha: Vec::new(),
            beta: Vec::new(),
            gamma: Vec::new(),
            epochs: 100,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 128,
            hidden: 100,
            seed: 0,
        }
    }
}

fn weight_at(v: &[f64], j: usize) -> f64 {
    v.get(j).copied().unwrap_or(1.0)
}

impl MtlConfig {
    /// (α_j, β_j, γ_j)
    pub fn task_weights(&self, j: usize) -> (f64, f64, f64) {
        (
            weight_at(&self.alpha, j),
            weight_at(&self.beta, j),
            weight_at(&self.gamma, j),
        )
    }

    pub fn with_gamma(mut self, gamma: f64, tasks: usize) -> Self {
        self.gamma = vec![gamma; tasks];
        self
    }

    pub fn validate(&self, tasks: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "mtl: epochs, batch_size and hidden must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "mtl: lr must be > 0 and weight_decay >= 0".into(),
            ));
        }
        for j in 0..tasks {
            let (a, b, g) = self.task_weights(j);
            if !(a >= 0.0 && b >= 0.0 && g >= 0.0) {
                return Err(Error::Config(format!(
                    "mtl: task {j} has a negative weight"
                )));
            }
            if b == 0.0 && g == 0.0 {
                return Err(Error::Config(format!(
                    "mtl: task {j} needs beta or gamma > 0"
                )));
            }
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlModel {
    pub n_features: usize,
    pub feature_union: Vec<usize>,
    pub trunk: Net,
    pub heads: Vec<Layer>,
    /// Empty when the model is trained without distillation.
    pub projections: Vec<Layer>,
}

/// Per-batch objective and its components.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: Vec<f64>,
    pub mse: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean objective per epoch (minibatch losses weighted by batch size).
    pub total: Vec<f64>,
    /// `ce[epoch][task]`
    pub ce: Vec<Vec<f64>>,
    /// `distill[epoch][task]`
    pub distill: Vec<Vec<f64>>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

pub struct MtlGrads {
    pub trunk: NetGrads,
    pub heads: Vec<LayerGrad>,
    pub projections: Vec<LayerGrad>,
}

impl MtlGrads {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.trunk.slices();
        out.extend(self.heads.iter().flat_map(LayerGrad::slices));
        out.extend(self.projections.iter().flat_map(LayerGrad::slices));
        out
    }
}

impl MtlModel {
    /// Hard-sharing model without distillation projections.
    pub fn plain(
        n_features: usize,
        feature_union: Vec<usize>,
        tasks: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::with_projections(n_features, feature_union, tasks, hidden, &[], seed)
    }

    /// Model with one distillation projection per entry of
    /// `projection_dims` (pass an empty slice for none).
    pub fn with_projections(
        n_features: usize,
        feature_union: Vec<usize>,
        tasks: usize,
        hidden: usize,
        projection_dims: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Config("at least one task is required".into()));
        }
        if feature_union.is_empty() {
            return Err(Error::Empty("feature union"));
        }
        if let Some(&f) = feature_union.iter().find(|&&f| f >= n_features) {
            return Err(Error::Shape {
                expected: n_features,
                got: f + 1,
            });
        }
        let spec = NetSpec::new(
            vec![feature_union.len(), hidden],
            vec![Activation::Relu],
            seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Net::init_with_rng(&spec, &mut rng);
        let heads = (0..tasks)
            .map(|_| Layer::init(hidden, 1, Activation::Identity, &mut rng))
            .collect();
        let mut proj_rng = ChaCha8Rng::seed_from_u64(seed);
        proj_rng.set_stream(2);
        let projections = projection_dims
            .iter()
            .map(|&d| Layer::init(hidden, d, Activation::Identity, &mut proj_rng))
            .collect();
        Ok(MtlModel {
            n_features,
            feature_union,
            trunk,
            heads,
            projections,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn hidden(&self) -> usize {
        self.trunk.output_size()
    }

    pub fn distills(&self) -> bool {
        !self.projections.is_empty()
    }

    fn select(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Shape {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        Ok(x.select(Axis(1), &self.feature_union))
    }

    /// Shared representation for full-width rows.
    pub fn trunk_output(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xu = self.select(x)?;
        Ok(self
            .trunk
            .forward_batch(xu.view())?
            .pop()
            .expect("trunk layer"))
    }

    /// Logits (rows × tasks); the trunk runs once per row.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let t = self.trunk_output(x)?;
        let mut out = Array2::zeros((x.nrows(), self.n_tasks()));
        for (j, head) in self.heads.iter().enumerate() {
            out.column_mut(j).assign(&head.forward(t.view()).column(0));
        }
        Ok(out)
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.logits(x)?.mapv(sigmoid))
    }

    /// Distillation outputs of task `j` (rows × embedding dim).
    pub fn projection_output(&self, x: ArrayView2<f64>, j: usize) -> Result<Array2<f64>> {
        let proj = self.projections.get(j).ok_or(Error::TaskIndex {
            index: j,
            tasks: self.projections.len(),
        })?;
        Ok(proj.forward(self.trunk_output(x)?.view()))
    }

    /// Probability for task `j` on a single full-width row.
    pub fn forward_task(&self, x: &[f64], j: usize) -> Result<f64> {
        if j >= self.n_tasks() {
            return Err(Error::TaskIndex {
                index: j,
                tasks: self.n_tasks(),
            });
        }
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let t = self.trunk_output(view)?;
        Ok(sigmoid(self.heads[j].forward(t.view())[[0, 0]]))
    }

    /// Probabilities for every task on a single full-width row.
    pub fn forward_all(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.predict_proba(view)?.row(0).to_vec())
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.param_slices_mut();
        out.extend(self.heads.iter_mut().flat_map(Layer::param_slices_mut));
        out.extend(
            self.projections
                .iter_mut()
                .flat_map(Layer::param_slices_mut),
        );
        out
    }

    /// Objective and gradients for a batch already restricted to the union.
    fn loss_and_grads(
        &self,
        xu: ArrayView2<f64>,
        labels: ArrayView2<u8>,
        targets: &[Array2<f64>],
        config: &MtlConfig,
    ) -> Result<(LossBreakdown, MtlGrads)> {
        let b = xu.nrows();
        let m = self.n_tasks();
        let outs = self.trunk.forward_batch(xu)?;
        let t = outs.last().expect("trunk layer");
        let mut d_trunk = Array2::<f64>::zeros(t.raw_dim());
        let mut breakdown = LossBreakdown {
            total: 0.0,
            ce: vec![0.0; m],
            mse: vec![0.0; m],
        };
        let mut head_grads = Vec::with_capacity(m);
        for (j, head) in self.heads.iter().enumerate() {
            let (alpha, beta, _) = config.task_weights(j);
            let z = head.forward(t.view());
            let zs = z.as_slice().expect("standard layout");
            let y: Vec<f64> = labels.column(j).iter().map(|&v| v as f64).collect();
            breakdown.ce[j] = nn::bce_with_logits(zs, &y);
            let dz = Array2::from_shape_vec((b, 1), nn::bce_with_logits_grad(zs, &y, alpha * beta))
                .expect("shape");
            let (g, dt) = head.backward(t.view(), &z, &dz);
            d_trunk += &dt;
            head_grads.push(g);
        }
        let mut proj_grads = Vec::with_capacity(self.projections.len());
        for (j, proj) in self.projections.iter().enumerate() {
            let (alpha, _, gamma) = config.task_weights(j);
            let target = &targets[j];
            let p = proj.forward(t.view());
            let ps = p.as_slice().expect("standard layout");
            let ts = target.as_slice().expect("standard layout");
            // mean over rows of per-row mean squared error == mean over entries
            breakdown.mse[j] = nn::mse(ps, ts);
            let dp = Array2::from_shape_vec(p.raw_dim(), nn::mse_grad(ps, ts, alpha * gamma))
                .expect("shape");
            let (g, dt) = proj.backward(t.view(), &p, &dp);
            d_trunk += &dt;
            proj_grads.push(g);
        }
        for j in 0..m {
            let (alpha, beta, gamma) = config.task_weights(j);
            breakdown.total += alpha * (beta * breakdown.ce[j] + gamma * breakdown.mse[j]);
        }
        let (trunk_grads, _) = self.trunk.backward_batch(xu, &outs, d_trunk)?;
        Ok((
            breakdown,
            MtlGrads {
                trunk: trunk_grads,
                heads: head_grads,
                projections: proj_grads,
            },
        ))
    }

    fn check_batch(
        &self,
        rows: usize,
        labels: ArrayView2<u8>,
        targets: &[(usize, usize)],
    ) -> Result<()> {
        if labels.nrows() != rows {
            return Err(Error::Shape {
                expected: rows,
                got: labels.nrows(),
            });
        }
        if labels.ncols() != self.n_tasks() {
            return Err(Error::Shape {
                expected: self.n_tasks(),
                got: labels.ncols(),
            });
        }
        if self.distills() {
            if targets.len() != self.projections.len() {
                return Err(Error::Shape {
                    expected: self.projections.len(),
                    got: targets.len(),
                });
            }
            for (p, &(r, c)) in self.projections.iter().zip(targets) {
                if r != rows || c != p.fan_out() {
                    return Err(Error::Shape {
                        expected: rows * p.fan_out(),
                        got: r * c,
                    });
                }
            }
        }
        Ok(())
    }

    /// Multi-task objective on a batch of full-width rows.
    pub fn multitask_loss(
        &self,
        x: ArrayView2<f64>,
        labels: ArrayView2<u8>,
        targets: &[Array2<f64>],
        config: &MtlConfig,
    ) -> Result<LossBreakdown> {
        self.check_batch(x.nrows(), labels, &shapes(targets))?;
        let xu = self.select(x)?;
        Ok(self.loss_and_grads(xu.view(), labels, targets, config)?.0)
    }

    /// Gradients of the multi-task objective (exposed for verification).
    pub fn multitask_grads(
        &self,
        x: ArrayView2<f64>,
        labels: ArrayView2<u8>,
        targets: &[Array2<f64>],
        config: &MtlConfig,
    ) -> Result<MtlGrads> {
        self.check_batch(x.nrows(), labels, &shapes(targets))?;
        let xu = self.select(x)?;
        Ok(self.loss_and_grads(xu.view(), labels, targets, config)?.1)
    }
}

fn shapes(targets: &[Array2<f64>]) -> Vec<(usize, usize)> {
    targets.iter().map(Array2::dim).collect()
}

/// Sorted union of the features each task's ensemble selected, optionally
/// restricted to `allowed`.
pub fn feature_union(
    gbdts: &[GbdtModel],
    top_k: Option<usize>,
    allowed: Option<&[usize]>,
) -> Result<Vec<usize>> {
    let mut union = BTreeSet::new();
    for g in gbdts {
        union.extend(g.selected_features(top_k)?);
    }
    if let Some(allowed) = allowed {
        let allowed: BTreeSet<usize> = allowed.iter().copied().collect();
        union.retain(|f| allowed.contains(f));
    }
    Ok(union.into_iter().collect())
}

/// Untrained distilled multi-task model: trunk on the union of the
/// ensembles' selected features, one head and one projection per task.
pub fn build_codmtl(
    gbdts: &[GbdtModel],
    embeddings: &[LeafEmbeddingModel],
    config: &MtlConfig,
    top_k: Option<usize>,
    allowed: Option<&[usize]>,
) -> Result<MtlModel> {
    if gbdts.len() != embeddings.len() {
        return Err(Error::Shape {
            expected: gbdts.len(),
            got: embeddings.len(),
        });
    }
    let n_features = gbdts.first().ok_or(Error::Empty("task models"))?.n_features;
    if gbdts.iter().any(|g| g.n_features != n_features) {
        return Err(Error::Config(
            "task ensembles disagree on the feature width".into(),
        ));
    }
    config.validate(gbdts.len())?;
    let union = feature_union(gbdts, top_k, allowed)?;
    let dims: Vec<usize> = embeddings.iter().map(LeafEmbeddingModel::dim).collect();
    MtlModel::with_projections(
        n_features,
        union,
        gbdts.len(),
        config.hidden,
        &dims,
        config.seed,
    )
}

fn order_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Minibatch AdamW on the multi-task objective.
///
/// `rows` index into `x`/`y`; `targets[j]` row `i` is the embedding target
/// for `rows[i]`. Pass an empty `targets` slice for models without
/// projections.
pub fn train_mtl(
    model: &mut MtlModel,
    x: &Array2<f64>,
    y: &Array2<u8>,
    rows: &[usize],
    targets: &[DistillTarget],
    config: &MtlConfig,
) -> Result<TrainHistory> {
    config.validate(model.n_tasks())?;
    if rows.is_empty() {
        return Err(Error::Empty("training rows"));
    }
    if y.ncols() != model.n_tasks() {
        return Err(Error::Shape {
            expected: model.n_tasks(),
            got: y.ncols(),
        });
    }
    let xu_all = model.select(x.select(Axis(0), rows).view())?;
    let y_all = y.select(Axis(0), rows);
    let t_all: Vec<&Array2<f64>> = targets.iter().map(|t| &t.e).collect();
    let t_shapes: Vec<(usize, usize)> = t_all.iter().map(|t| t.dim()).collect();
    model.check_batch(rows.len(), y_all.view(), &t_shapes)?;

    let m = model.n_tasks();
    let n = rows.len() as f64;
    let mut opt = AdamW::new(config.adamw());
    let mut rng = order_rng(config.seed);
    let positions: Vec<usize> = (0..rows.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut ce = vec![0.0; m];
        let mut mse = vec![0.0; m];
        for batch in nn::epoch_batches(&positions, config.batch_size, &mut rng) {
            let xb = xu_all.select(Axis(0), &batch);
            let yb = y_all.select(Axis(0), &batch);
            let tb: Vec<Array2<f64>> = t_all.iter().map(|t| t.select(Axis(0), &batch)).collect();
            let (loss, grads) = model.loss_and_grads(xb.view(), yb.view(), &tb, config)?;
            let w = batch.len() as f64;
            total += loss.total * w;
            for j in 0..m {
                ce[j] += loss.ce[j] * w;
                mse[j] += loss.mse[j] * w;
            }
            opt.step(&mut model.param_slices_mut(), &grads.slices())?;
        }
        let total = total / n;
        if !total.is_finite() {
            return Err(Error::NonFinite { epoch });
        }
        history.total.push(total);
        history.ce.push(ce.into_iter().map(|v| v / n).collect());
        history
            .distill
            .push(mse.into_iter().map(|v| v / n).collect());
    }
    Ok(history)
}

/// Train the distilled model on a fold's training rows. `targets` are
/// aligned with `fold.train_rows`.
pub fn train_codmtl(
    model: &mut MtlModel,
    cohort: &Cohort,
    fold: &FoldSplit,
    targets: &[DistillTarget],
    config: &MtlConfig,
) -> Result<TrainHistory> {
    train_mtl(
        model,
        &cohort.x,
        &cohort.y,
        &fold.train_rows,
        targets,
        config,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Logreg,
    MlpSingle,
    MtlPlain,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::Logreg,
        BaselineKind::MlpSingle,
        BaselineKind::MtlPlain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Logreg => "logreg",
            BaselineKind::MlpSingle => "mlp_single",
            BaselineKind::MtlPlain => "mtl_plain",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logreg" => Ok(BaselineKind::Logreg),
            "mlp_single" => Ok(BaselineKind::MlpSingle),
            "mtl_plain" => Ok(BaselineKind::MtlPlain),
            other => Err(Error::Config(format!("unknown baseline kind `{other}`"))),
        }
    }
}

/// Single-task network: either one linear layer (logistic regression) or
/// a one-hidden-layer relu MLP, both producing a logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTaskNet {
    pub net: Net,
}

impl SingleTaskNet {
    pub fn logistic(n_features: usize, seed: u64) -> Result<Self> {
        let spec = NetSpec::new(vec![n_features, 1], vec![Activation::Identity], seed)?;
        Ok(SingleTaskNet {
            net: Net::init(&spec),
        })
    }

    pub fn mlp(n_features: usize, hidden: usize, seed: u64) -> Result<Self> {
        let spec = NetSpec::relu_hidden(vec![n_features, hidden, 1], Activation::Identity, seed)?;
        Ok(SingleTaskNet {
            net: Net::init(&spec),
        })
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let out = self.net.forward_batch(x)?.pop().expect("output layer");
        Ok(out.column(0).iter().map(|&z| sigmoid(z)).collect())
    }

    /// Minibatch AdamW on mean binary cross-entropy; returns per-epoch loss.
    pub fn train(
        &mut self,
        x: &Array2<f64>,
        labels: &[u8],
        rows: &[usize],
        config: &MtlConfig,
    ) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Err(Error::Empty("training rows"));
        }
        if labels.len() != x.nrows() {
            return Err(Error::Shape {
                expected: x.nrows(),
                got: labels.len(),
            });
        }
        let x_all = x.select(Axis(0), rows);
        let y_all: Vec<f64> = rows.iter().map(|&r| labels[r] as f64).collect();
        let n = rows.len() as f64;
        let mut opt = AdamW::new(config.adamw());
        let mut rng = order_rng(config.seed);
        let positions: Vec<usize> = (0..rows.len()).collect();
        let mut history = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let mut total = 0.0;
            for batch in nn::epoch_batches(&positions, config.batch_size, &mut rng) {
                let xb = x_all.select(Axis(0), &batch);
                let yb: Vec<f64> = batch.iter().map(|&i| y_all[i]).collect();
                let outs = self.net.forward_batch(xb.view())?;
                let z = outs.last().expect("output layer");
                let zs = z.as_slice().expect("standard layout");
                total += nn::bce_with_logits(zs, &yb) * batch.len() as f64;
                let dz =
                    Array2::from_shape_vec(z.raw_dim(), nn::bce_with_logits_grad(zs, &yb, 1.0))
                        .expect("shape");
                let (grads, _) = self.net.backward_batch(xb.view(), &outs, dz)?;
                opt.step(&mut self.net.param_slices_mut(), &grads.slices())?;
            }
            let total = total / n;
            if !total.is_finite() {
                return Err(Error::NonFinite { epoch });
            }
            history.push(total);
        }
        Ok(history)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaselineModel {
    /// One network per task, in task order.
    SingleTask(Vec<SingleTaskNet>),
    MultiTask(MtlModel),
}

/// A trained baseline and the tasks it predicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub tasks: Vec<usize>,
    pub model: BaselineModel,
    /// Per-epoch training loss (summed objective for the multi-task model;
    /// one curve per task otherwise).
    pub history: Vec<Vec<f64>>,
}

impl Baseline {
    /// Probabilities (rows × tasks) in the order of `self.tasks`.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.model {
            BaselineModel::MultiTask(m) => m.predict_proba(x),
            BaselineModel::SingleTask(nets) => {
                let mut out = Array2::zeros((x.nrows(), nets.len()));
                for (j, net) in nets.iter().enumerate() {
                    let p = net.predict_proba(x)?;
                    out.column_mut(j)
                        .iter_mut()
                        .zip(p)
                        .for_each(|(d, v)| *d = v);
                }
                Ok(out)
            }
        }
    }
}

/// Train a baseline on the fold's training rows, for one task or (when
/// `task` is `None`) all tasks. `mtl_plain` always covers all tasks.
pub fn train_baseline(
    kind: BaselineKind,
    cohort: &Cohort,
    fold: &FoldSplit,
    task: Option<usize>,
    config: &MtlConfig,
) -> Result<Baseline> {
    let m = cohort.n_tasks();
    if let Some(j) = task {
        if j >= m {
            return Err(Error::TaskIndex { index: j, tasks: m });
        }
    }
    let tasks: Vec<usize> = match (kind, task) {
        (BaselineKind::MtlPlain, _) | (_, None) => (0..m).collect(),
        (_, Some(j)) => vec![j],
    };
    let l = cohort.n_features();
    match kind {
        BaselineKind::Logreg | BaselineKind::MlpSingle => {
            let mut nets = Vec::new();
            let mut history = Vec::new();
            for &j in &tasks {
                let mut net = match kind {
                    BaselineKind::Logreg => SingleTaskNet::logistic(l, config.seed)?,
                    _ => SingleTaskNet::mlp(l, config.hidden, config.seed)?,
                };
                history.push(net.train(&cohort.x, &cohort.labels(j), &fold.train_rows, config)?);
                nets.push(net);
            }
            Ok(Baseline {
                kind,
                tasks,
                model: BaselineModel::SingleTask(nets),
                history,
            })
        }
        BaselineKind::MtlPlain => {
            let mut model = MtlModel::plain(l, (0..l).collect(), m, config.hidden, config.seed)?;
            let h = train_mtl(
                &mut model,
                &cohort.x,
                &cohort.y,
                &fold.train_rows,
                &[],
                config,
            )?;
            Ok(Baseline {
                kind,
                tasks,
                model: BaselineModel::MultiTask(model),
                history: vec![h.total],
            })
        }
    }
}
