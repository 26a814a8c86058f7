//! Histogram-based gradient-boosted decision trees for binary logistic loss.
//!
//! Trees grow leaf-wise (best gain first) up to `max_leaves`, using
//! per-feature quantile bins. A sample goes left when its value is `<=` the
//! split threshold; binning and inference share that rule, so training rows
//! land in the same leaf either way.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub num_trees: usize,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    pub shrinkage: f64,
    pub l2_lambda: f64,
    pub num_bins: usize,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            num_trees: 100,
            max_leaves: 31,
            min_samples_leaf: 20,
            shrinkage: 0.1,
            l2_lambda: 1.0,
            num_bins: 255,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gbdt: {m}")));
        if self.num_trees < 1 {
            return bad("num_trees must be >= 1");
        }
        if self.max_leaves < 2 {
            return bad("max_leaves must be >= 2");
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return bad("shrinkage must lie in (0, 1]");
        }
        if !(self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be >= 0");
        }
        if self.num_bins < 2 || self.num_bins > u16::MAX as usize {
            return bad("num_bins must lie in [2, 65535]");
        }
        Ok(())
    }
}

/// Nodes are stored in preorder; the root is `nodes[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_id: usize,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Leaf reached by `x`: (leaf id, raw leaf value).
    pub fn route(&self, x: &[f64]) -> (usize, f64) {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
                TreeNode::Leaf { leaf_id, value } => return (leaf_id, value),
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    /// Leaf values indexed by leaf id.
    pub fn leaf_values(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_leaves()];
        for n in &self.nodes {
            if let TreeNode::Leaf { leaf_id, value } = *n {
                v[leaf_id] = value;
            }
        }
        v
    }
}

/// Additive tree ensemble on the log-odds scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub n_features: usize,
    pub base_score: f64,
    pub shrinkage: f64,
    pub l2_lambda: f64,
    pub trees: Vec<Tree>,
    pub leaf_counts: Vec<usize>,
    pub feature_gain: Vec<f64>,
}

impl GbdtModel {
    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::Shape {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict_margin(&self, x: &[f64]) -> Result<f64> {
        self.check_width(x)?;
        let sum: f64 = self.trees.iter().map(|t| t.route(x).1).sum();
        Ok(self.base_score + self.shrinkage * sum)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        self.predict_margin(x).map(sigmoid)
    }

    /// Leaf id reached in each tree, in tree order.
    pub fn leaf_indices(&self, x: &[f64]) -> Result<Vec<usize>> {
        self.check_width(x)?;
        Ok(self.trees.iter().map(|t| t.route(x).0).collect())
    }

    pub fn predict_margins(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        x.rows()
            .into_iter()
            .map(|r| self.predict_margin(r.as_slice().expect("standard layout")))
            .collect()
    }

    pub fn predict_probas(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.predict_margins(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn leaf_indices_batch(&self, x: &Array2<f64>) -> Result<Vec<Vec<usize>>> {
        x.rows()
            .into_iter()
            .map(|r| self.leaf_indices(r.as_slice().expect("standard layout")))
            .collect()
    }

    /// Features used by the ensemble, ascending.
    ///
    /// Without `top_k`, every feature with positive cumulative gain. With
    /// `top_k`, the `top_k` highest-gain features among those (ties go to
    /// the lower index).
    pub fn selected_features(&self, top_k: Option<usize>) -> Result<Vec<usize>> {
        let mut used: Vec<usize> = (0..self.n_features)
            .filter(|&f| self.feature_gain[f] > 0.0)
            .collect();
        if let Some(k) = top_k {
            if k > self.n_features {
                return Err(Error::Config(format!(
                    "top_k = {k} exceeds the feature count {}",
                    self.n_features
                )));
            }
            used.sort_by(|&a, &b| {
                self.feature_gain[b]
                    .total_cmp(&self.feature_gain[a])
                    .then(a.cmp(&b))
            });
            used.truncate(k);
            used.sort_unstable();
        }
        Ok(used)
    }
}

/// Sorted split candidates for one feature. `bin(x)` counts the edges
/// strictly below `x`, so `x <= edges[b]` exactly when `bin(x) <= b`.
#[derive(Debug, Clone)]
struct BinMapper {
    edges: Vec<f64>,
}

impl BinMapper {
    fn fit(values: &mut [f64], num_bins: usize) -> Self {
        values.sort_by(f64::total_cmp);
        let mut distinct: Vec<(f64, usize)> = Vec::new();
        for &v in values.iter().filter(|v| !v.is_nan()) {
            match distinct.last_mut() {
                Some((last, c)) if *last == v => *c += 1,
                _ => distinct.push((v, 1)),
            }
        }
        let mid = |i: usize| {
            let (a, b) = (distinct[i].0, distinct[i + 1].0);
            let m = a + (b - a) / 2.0;
            if m < b {
                m
            } else {
                a
            }
        };
        let mut edges = Vec::new();
        if distinct.len() <= num_bins {
            edges.extend((0..distinct.len().saturating_sub(1)).map(mid));
        } else {
            let total: usize = distinct.iter().map(|d| d.1).sum();
            let per_bin = total as f64 / num_bins as f64;
            let mut cum = 0usize;
            let mut next_target = per_bin;
            for i in 0..distinct.len() - 1 {
                cum += distinct[i].1;
                if cum as f64 >= next_target {
                    edges.push(mid(i));
                    while next_target <= cum as f64 {
                        next_target += per_bin;
                    }
                    if edges.len() + 1 == num_bins {
                        break;
                    }
                }
            }
        }
        BinMapper { edges }
    }

    fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    fn bin(&self, x: f64) -> u16 {
        if x.is_nan() {
            return self.edges.len() as u16;
        }
        self.edges.partition_point(|&e| e < x) as u16
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    bin: usize,
    gain: f64,
}

/// Gradient/Hessian/count histograms for every feature, flattened.
#[derive(Debug, Clone)]
struct Histogram {
    g: Vec<f64>,
    h: Vec<f64>,
    n: Vec<u32>,
}

struct Grower<'a> {
    bins: &'a [Vec<u16>],
    offsets: Vec<usize>,
    n_bins: Vec<usize>,
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a GbdtConfig,
}

impl Grower<'_> {
    fn total_bins(&self) -> usize {
        *self.offsets.last().expect("offsets")
    }

    fn build_hist(&self, rows: &[usize]) -> Histogram {
        let total = self.total_bins();
        let mut hist = Histogram {
            g: vec![0.0; total],
            h: vec![0.0; total],
            n: vec![0; total],
        };
        for (f, col) in self.bins.iter().enumerate() {
            let off = self.offsets[f];
            for &r in rows {
                let b = off + col[r] as usize;
                hist.g[b] += self.grad[r];
                hist.h[b] += self.hess[r];
                hist.n[b] += 1;
            }
        }
        hist
    }

    fn subtract(parent: &Histogram, child: &Histogram) -> Histogram {
        Histogram {
            g: parent.g.iter().zip(&child.g).map(|(a, b)| a - b).collect(),
            h: parent.h.iter().zip(&child.h).map(|(a, b)| a - b).collect(),
            n: parent.n.iter().zip(&child.n).map(|(a, b)| a - b).collect(),
        }
    }

    fn best_split(&self, hist: &Histogram, rows: usize) -> Option<SplitChoice> {
        let lambda = self.config.l2_lambda;
        let msl = self.config.min_samples_leaf.max(1) as u32;
        let score = |g: f64, h: f64| {
            if h + lambda > 0.0 {
                g * g / (h + lambda)
            } else {
                0.0
            }
        };
        let mut best: Option<SplitChoice> = None;
        for f in 0..self.bins.len() {
            let nb = self.n_bins[f];
            if nb < 2 {
                continue;
            }
            let off = self.offsets[f];
            let (gt, ht): (f64, f64) = (
                hist.g[off..off + nb].iter().sum(),
                hist.h[off..off + nb].iter().sum(),
            );
            let parent = score(gt, ht);
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0u32);
            for b in 0..nb - 1 {
                gl += hist.g[off + b];
                hl += hist.h[off + b];
                nl += hist.n[off + b];
                let nr = rows as u32 - nl;
                if nl < msl {
                    continue;
                }
                if nr < msl {
                    break;
                }
                let (gr, hr) = (gt - gl, ht - hl);
                if hl + lambda <= 0.0 || hr + lambda <= 0.0 {
                    continue;
                }
                let gain = 0.5 * (score(gl, hl) + score(gr, hr) - parent);
                if gain > 0.0 && best.is_none_or(|s| gain > s.gain) {
                    best = Some(SplitChoice {
                        feature: f,
                        bin: b,
                        gain,
                    });
                }
            }
        }
        best
    }
}

enum Building {
    Leaf {
        rows: Vec<usize>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

struct OpenLeaf {
    node: usize,
    rows: Vec<usize>,
    hist: Histogram,
    best: Option<SplitChoice>,
}

/// Grow one tree; returns it with the row membership of each leaf id.
fn grow_tree(
    grower: &Grower<'_>,
    mappers: &[BinMapper],
    rows: Vec<usize>,
    feature_gain: &mut [f64],
) -> (Tree, Vec<Vec<usize>>) {
    let cfg = grower.config;
    let mut arena = vec![Building::Leaf { rows: Vec::new() }];
    let hist = grower.build_hist(&rows);
    let best = grower.best_split(&hist, rows.len());
    let mut open = vec![OpenLeaf {
        node: 0,
        rows,
        hist,
        best,
    }];
    let mut n_leaves = 1;

    while n_leaves < cfg.max_leaves {
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.best.map(|s| (i, s.gain)))
            .fold(None, |acc: Option<(usize, f64)>, (i, g)| match acc {
                Some((_, bg)) if bg >= g => acc,
                _ => Some((i, g)),
            });
        let Some((idx, _)) = pick else { break };
        let leaf = open.swap_remove(idx);
        let split = leaf.best.expect("picked leaf has a split");
        let col = &grower.bins[split.feature];
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = leaf
            .rows
            .iter()
            .partition(|&&r| col[r] as usize <= split.bin);

        let (small, large_is_left) = if left_rows.len() <= right_rows.len() {
            (&left_rows, false)
        } else {
            (&right_rows, true)
        };
        let small_hist = grower.build_hist(small);
        let large_hist = Grower::subtract(&leaf.hist, &small_hist);
        let (left_hist, right_hist) = if large_is_left {
            (large_hist, small_hist)
        } else {
            (small_hist, large_hist)
        };

        feature_gain[split.feature] += split.gain;
        let left = arena.len();
        let right = left + 1;
        arena.push(Building::Leaf { rows: Vec::new() });
        arena.push(Building::Leaf { rows: Vec::new() });
        arena[leaf.node] = Building::Split {
            feature: split.feature,
            threshold: mappers[split.feature].edges[split.bin],
            left,
            right,
        };
        for (node, rows, hist) in [
            (left, left_rows, left_hist),
            (right, right_rows, right_hist),
        ] {
            let best = grower.best_split(&hist, rows.len());
            open.push(OpenLeaf {
                node,
                rows,
                hist,
                best,
            });
        }
        n_leaves += 1;
    }
    for leaf in open {
        arena[leaf.node] = Building::Leaf { rows: leaf.rows };
    }

    // preorder renumbering; leaf ids follow preorder
    let mut nodes = Vec::with_capacity(arena.len());
    let mut members = Vec::new();
    let lambda = cfg.l2_lambda;
    fn emit(
        arena: &mut [Building],
        at: usize,
        nodes: &mut Vec<TreeNode>,
        members: &mut Vec<Vec<usize>>,
        grad: &[f64],
        hess: &[f64],
        lambda: f64,
    ) -> usize {
        let me = nodes.len();
        match &mut arena[at] {
            Building::Leaf { rows } => {
                let rows = std::mem::take(rows);
                let g: f64 = rows.iter().map(|&r| grad[r]).sum();
                let h: f64 = rows.iter().map(|&r| hess[r]).sum();
                let value = if h + lambda > 0.0 {
                    -g / (h + lambda)
                } else {
                    0.0
                };
                nodes.push(TreeNode::Leaf {
                    leaf_id: members.len(),
                    value,
                });
                members.push(rows);
            }
            &mut Building::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                nodes.push(TreeNode::Split {
                    feature,
                    threshold,
                    left: 0,
                    right: 0,
                });
                let l = emit(arena, left, nodes, members, grad, hess, lambda);
                let r = emit(arena, right, nodes, members, grad, hess, lambda);
                if let TreeNode::Split { left, right, .. } = &mut nodes[me] {
                    *left = l;
                    *right = r;
                }
            }
        }
        me
    }
    emit(
        &mut arena,
        0,
        &mut nodes,
        &mut members,
        grower.grad,
        grower.hess,
        lambda,
    );
    (Tree { nodes }, members)
}

/// Mean logistic loss of margins against binary labels.
pub fn logistic_loss(margins: &[f64], y: &[u8]) -> f64 {
    let t: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    crate::nn::bce_with_logits(margins, &t)
}

/// Fit a boosted ensemble to binary labels with logistic loss.
pub fn train_gbdt(x: &Array2<f64>, y: &[u8], config: &GbdtConfig) -> Result<GbdtModel> {
    config.validate()?;
    let (n, l) = x.dim();
    if n == 0 || l == 0 {
        return Err(Error::Empty("feature matrix"));
    }
    if y.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: y.len(),
        });
    }
    let positives = y.iter().filter(|&&v| v == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }

    let mappers: Vec<BinMapper> = (0..l)
        .map(|f| BinMapper::fit(&mut x.column(f).to_vec(), config.num_bins))
        .collect();
    let bins: Vec<Vec<u16>> = mappers
        .iter()
        .enumerate()
        .map(|(f, m)| x.column(f).iter().map(|&v| m.bin(v)).collect())
        .collect();
    let n_bins: Vec<usize> = mappers.iter().map(BinMapper::n_bins).collect();
    let mut offsets = vec![0];
    for nb in &n_bins {
        offsets.push(offsets.last().unwrap() + nb);
    }

    let rate = positives as f64 / n as f64;
    let base_score = (rate / (1.0 - rate)).ln();
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut feature_gain = vec![0.0; l];
    let mut trees = Vec::with_capacity(config.num_trees);

    for _ in 0..config.num_trees {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - y[i] as f64;
            hess[i] = p * (1.0 - p);
        }
        let grower = Grower {
            bins: &bins,
            offsets: offsets.clone(),
            n_bins: n_bins.clone(),
            grad: &grad,
            hess: &hess,
            config,
        };
        let (tree, members) = grow_tree(&grower, &mappers, (0..n).collect(), &mut feature_gain);
        let values = tree.leaf_values();
        for (leaf, rows) in members.iter().enumerate() {
            for &r in rows {
                margins[r] += config.shrinkage * values[leaf];
            }
        }
        trees.push(tree);
    }

    let leaf_counts = trees.iter().map(Tree::num_leaves).collect();
    Ok(GbdtModel {
        n_features: l,
        base_score,
        shrinkage: config.shrinkage,
        l2_lambda: config.l2_lambda,
        trees,
        leaf_counts,
        feature_gain,
    })
}
