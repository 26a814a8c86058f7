//! Leaf-index embeddings: a boosted ensemble's per-tree leaf ids become a
//! concatenated one-hot vector, a small network maps it to a dense
//! embedding, and a linear readout on that embedding is fit to the
//! ensemble's own probabilities. The embeddings then act as regression
//! targets for the distilled network.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::GbdtModel;
use crate::nn::{self, Activation, AdamW, AdamWConfig, Layer, Net, NetSpec, OneHotBatch};

/// Position of each tree's leaf inside the concatenated one-hot vector.
pub fn leaf_positions(leaves: &[usize], leaf_counts: &[usize]) -> Result<Vec<usize>> {
    if leaves.len() != leaf_counts.len() {
        return Err(Error::Shape {
            expected: leaf_counts.len(),
            got: leaves.len(),
        });
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(leaves.len());
    for (tree, (&leaf, &count)) in leaves.iter().zip(leaf_counts).enumerate() {
        if leaf >= count {
            return Err(Error::LeafOutOfRange { tree, leaf, count });
        }
        out.push(offset + leaf);
        offset += count;
    }
    Ok(out)
}

/// Concatenation of per-tree one-hot vectors.
pub fn leaf_onehot(leaves: &[usize], leaf_counts: &[usize]) -> Result<Vec<f64>> {
    let mut v = vec![0.0; leaf_counts.iter().sum()];
    for p in leaf_positions(leaves, leaf_counts)? {
        v[p] = 1.0;
    }
    Ok(v)
}

/// Sparse one-hot rows, one active position per tree.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMatrix {
    pub width: usize,
    pub active: Vec<Vec<usize>>,
}

impl OneHotMatrix {
    pub fn from_model(model: &GbdtModel, x: &Array2<f64>) -> Result<Self> {
        let active = model
            .leaf_indices_batch(x)?
            .iter()
            .map(|v| leaf_positions(v, &model.leaf_counts))
            .collect::<Result<Vec<_>>>()?;
        Ok(OneHotMatrix {
            width: model.leaf_counts.iter().sum(),
            active,
        })
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        for &p in &self.active[i] {
            v[p] = 1.0;
        }
        v
    }

    fn batch(&self, rows: &[usize]) -> Vec<Vec<usize>> {
        rows.iter().map(|&r| self.active[r].clone()).collect()
    }
}

/// Ensemble probabilities used as soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    q: Vec<f64>,
}

impl SoftTargets {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if let Some(v) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("soft target {v} outside [0, 1]")));
        }
        Ok(SoftTargets { q })
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// `q_i = sigmoid(margin(x_i))` for every row.
pub fn soft_targets(model: &GbdtModel, x: &Array2<f64>) -> Result<SoftTargets> {
    SoftTargets::new(model.predict_probas(x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 20,
            hidden: 100,
            epochs: 100,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be >= 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "embedding epochs and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One-hot leaves → dense embedding (`net`), plus the scalar readout that
/// was fit against the ensemble's probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafEmbeddingModel {
    pub leaf_counts: Vec<usize>,
    pub net: Net,
    pub readout: Layer,
}

impl LeafEmbeddingModel {
    pub fn input_width(&self) -> usize {
        self.net.input_size()
    }

    pub fn dim(&self) -> usize {
        self.net.output_size()
    }

    /// Dense embedding of a one-hot leaf vector.
    pub fn embed(&self, onehot: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .net
            .forward(onehot)?
            .pop()
            .expect("non-empty net")
            .to_vec())
    }

    pub fn embed_leaves(&self, leaves: &[usize]) -> Result<Vec<f64>> {
        let active = vec![leaf_positions(leaves, &self.leaf_counts)?];
        let out = self.net.forward_onehot(OneHotBatch {
            width: self.input_width(),
            active: &active,
        })?;
        Ok(out.last().expect("non-empty net").row(0).to_vec())
    }

    pub fn embed_all(&self, onehots: &OneHotMatrix) -> Result<Array2<f64>> {
        let mut outs = self.net.forward_onehot(OneHotBatch {
            width: onehots.width,
            active: &onehots.active,
        })?;
        Ok(outs.pop().expect("non-empty net"))
    }

    /// Readout logits `W · E + b` for every row.
    pub fn readout_logits(&self, onehots: &OneHotMatrix) -> Result<Vec<f64>> {
        let e = self.embed_all(onehots)?;
        Ok(self.readout.forward(e.view()).column(0).to_vec())
    }
}

/// Embedding matrix (rows × dim) the distilled network is trained to match.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTarget {
    pub e: Array2<f64>,
}

impl DistillTarget {
    pub fn from_model(model: &LeafEmbeddingModel, onehots: &OneHotMatrix) -> Result<Self> {
        Ok(DistillTarget {
            e: model.embed_all(onehots)?,
        })
    }

    pub fn select(&self, rows: &[usize]) -> Array2<f64> {
        self.e.select(Axis(0), rows)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingFit {
    pub model: LeafEmbeddingModel,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean minibatch loss per epoch.
    pub history: Vec<f64>,
}

fn full_loss(model: &LeafEmbeddingModel, onehots: &OneHotMatrix, q: &[f64]) -> Result<f64> {
    Ok(nn::bce_with_logits(&model.readout_logits(onehots)?, q))
}

/// Fit embedding net and readout jointly by minimizing soft-target binary
/// cross-entropy with AdamW.
pub fn train_leaf_embedding(
    onehots: &OneHotMatrix,
    leaf_counts: &[usize],
    q: &SoftTargets,
    config: &EmbeddingConfig,
) -> Result<EmbeddingFit> {
    config.validate()?;
    if onehots.is_empty() {
        return Err(Error::Empty("leaf one-hot matrix"));
    }
    if onehots.len() != q.len() {
        return Err(Error::Shape {
            expected: onehots.len(),
            got: q.len(),
        });
    }
    if onehots.width != leaf_counts.iter().sum::<usize>() {
        return Err(Error::Shape {
            expected: leaf_counts.iter().sum(),
            got: onehots.width,
        });
    }
    let sizes = if config.hidden > 0 {
        vec![onehots.width, config.hidden, config.dim]
    } else {
        vec![onehots.width, config.dim]
    };
    let spec = NetSpec::relu_hidden(sizes, Activation::Identity, config.seed)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = Net::init_with_rng(&spec, &mut init_rng);
    let readout = Layer::init(config.dim, 1, Activation::Identity, &mut init_rng);
    let mut model = LeafEmbeddingModel {
        leaf_counts: leaf_counts.to_vec(),
        net,
        readout,
    };

    let targets = q.values();
    let initial_loss = full_loss(&model, onehots, targets)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let all: Vec<usize> = (0..onehots.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for rows in nn::epoch_batches(&all, config.batch_size, &mut order_rng) {
            let active = onehots.batch(&rows);
            let input = OneHotBatch {
                width: onehots.width,
                active: &active,
            };
            let qb: Vec<f64> = rows.iter().map(|&r| targets[r]).collect();
            let outs = model.net.forward_onehot(input)?;
            let e = outs.last().expect("non-empty net");
            let z = model.readout.forward(e.view());
            let zs = z.as_slice().expect("standard layout");
            epoch_loss += nn::bce_with_logits(zs, &qb) * rows.len() as f64;
            let dz = Array2::from_shape_vec(z.raw_dim(), nn::bce_with_logits_grad(zs, &qb, 1.0))
                .expect("shape");
            let (g_readout, de) = model.readout.backward(e.view(), &z, &dz);
            let g_net = model.net.backward_onehot(input, &outs, de)?;
            let mut grads = g_net.slices();
            grads.extend(g_readout.slices());
            let mut params = model.net.param_slices_mut();
            params.extend(model.readout.param_slices_mut());
            opt.step(&mut params, &grads)?;
        }
        let mean = epoch_loss / onehots.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite { epoch });
        }
        history.push(mean);
    }
    let final_loss = full_loss(&model, onehots, targets)?;
    Ok(EmbeddingFit {
        model,
        initial_loss,
        final_loss,
        history,
    })
}

/// Mean squared difference between a network output and an embedding.
pub fn distill_loss(output: &[f64], target: &[f64]) -> Result<f64> {
    if output.len() != target.len() {
        return Err(Error::Shape {
            expected: target.len(),
            got: output.len(),
        });
    }
    Ok(nn::mse(output, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::{Tree, TreeNode};
    use crate::nn::sigmoid;

    #[test]
    fn onehot_examples() {
        assert_eq!(leaf_onehot(&[0], &[2]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            leaf_onehot(&[1, 0], &[2, 3]).unwrap(),
            vec![0.0, 1.0, 1.0, 0.0, 0.0]
        );
        let v = leaf_onehot(&[3, 1, 0], &[4, 2, 5]).unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(v.iter().sum::<f64>(), 3.0);
        assert!(matches!(
            leaf_onehot(&[2], &[2]),
            Err(Error::LeafOutOfRange { .. })
        ));
        assert!(leaf_onehot(&[0, 0], &[2]).is_err());
    }

    fn empty_model(base: f64) -> GbdtModel {
        GbdtModel {
            n_features: 1,
            base_score: base,
            shrinkage: 0.1,
            l2_lambda: 1.0,
            trees: vec![],
            leaf_counts: vec![],
            feature_gain: vec![0.0],
        }
    }

    #[test]
    fn soft_targets_of_empty_ensemble() {
        let x = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        let q = soft_targets(&empty_model(0.0), &x).unwrap();
        assert_eq!(q.values(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn soft_targets_match_predict_proba() {
        let model = GbdtModel {
            trees: vec![Tree {
                nodes: vec![
                    TreeNode::Split {
                        feature: 0,
                        threshold: 0.5,
                        left: 1,
                        right: 2,
                    },
                    TreeNode::Leaf {
                        leaf_id: 0,
                        value: -0.8,
                    },
                    TreeNode::Leaf {
                        leaf_id: 1,
                        value: 1.3,
                    },
                ],
            }],
            leaf_counts: vec![2],
            ..empty_model(0.2)
        };
        let x = Array2::from_shape_vec((4, 1), vec![0.0, 0.7, 0.4, 2.0]).unwrap();
        let q = soft_targets(&model, &x).unwrap();
        for (i, &qi) in q.values().iter().enumerate() {
            assert_eq!(qi, model.predict_proba(&[x[[i, 0]]]).unwrap());
        }
        assert!(soft_targets(&model, &Array2::zeros((2, 3))).is_err());
    }

    fn two_pattern_data(q0: f64, q1: f64) -> (OneHotMatrix, SoftTargets) {
        let active: Vec<Vec<usize>> = (0..64)
            .map(|i| if i % 2 == 0 { vec![0, 2] } else { vec![1, 3] })
            .collect();
        let q = (0..64).map(|i| if i % 2 == 0 { q0 } else { q1 }).collect();
        (
            OneHotMatrix { width: 4, active },
            SoftTargets::new(q).unwrap(),
        )
    }

    #[test]
    fn embedding_recovers_two_patterns() {
        let (oh, q) = two_pattern_data(0.9, 0.1);
        let cfg = EmbeddingConfig {
            dim: 4,
            hidden: 16,
            epochs: 500,
            batch_size: 16,
            seed: 3,
            ..Default::default()
        };
        let fit = train_leaf_embedding(&oh, &[2, 2], &q, &cfg).unwrap();
        assert!(fit.final_loss <= fit.initial_loss);
        let z = fit.model.readout_logits(&oh).unwrap();
        for (i, &zi) in z.iter().enumerate() {
            assert!(
                (sigmoid(zi) - q.values()[i]).abs() < 0.05,
                "row {i}: {}",
                sigmoid(zi)
            );
        }
    }

    #[test]
    fn embedding_with_uniform_half_targets() {
        let (oh, q) = two_pattern_data(0.5, 0.5);
        let cfg = EmbeddingConfig {
            dim: 4,
            hidden: 8,
            epochs: 200,
            batch_size: 16,
            seed: 1,
            ..Default::default()
        };
        let fit = train_leaf_embedding(&oh, &[2, 2], &q, &cfg).unwrap();
        assert!((fit.final_loss - std::f64::consts::LN_2).abs() < 1e-2);
    }

    #[test]
    fn embedding_deterministic_and_shaped() {
        let (oh, q) = two_pattern_data(0.7, 0.2);
        let cfg = EmbeddingConfig {
            dim: 3,
            hidden: 5,
            epochs: 5,
            batch_size: 8,
            seed: 9,
            ..Default::default()
        };
        let a = train_leaf_embedding(&oh, &[2, 2], &q, &cfg).unwrap().model;
        let b = train_leaf_embedding(&oh, &[2, 2], &q, &cfg).unwrap().model;
        assert_eq!(a, b);
        let e = a.embed(&oh.dense_row(0)).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e, a.embed(&oh.dense_row(2)).unwrap());
        assert_eq!(e, a.embed_leaves(&[0, 0]).unwrap());
        let target = DistillTarget::from_model(&a, &oh).unwrap();
        for i in 0..oh.len() {
            let row = a.embed(&oh.dense_row(i)).unwrap();
            assert!(row
                .iter()
                .zip(target.e.row(i))
                .all(|(x, y)| (x - y).abs() < 1e-12));
        }
        assert!(a.embed(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn embedding_errors() {
        let empty = OneHotMatrix {
            width: 2,
            active: vec![],
        };
        let q = SoftTargets::new(vec![]).unwrap();
        assert!(train_leaf_embedding(&empty, &[2], &q, &EmbeddingConfig::default()).is_err());
        assert!(SoftTargets::new(vec![1.2]).is_err());
    }

    #[test]
    fn distill_loss_examples() {
        assert_eq!(distill_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(distill_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        let (a, b) = ([0.1, 2.0, -3.0], [1.0, -0.5, 0.25]);
        assert_eq!(distill_loss(&a, &b).unwrap(), distill_loss(&b, &a).unwrap());
        assert!(distill_loss(&[1.0], &[1.0, 2.0]).is_err());
    }
}
