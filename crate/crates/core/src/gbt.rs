//! Second-order gradient-boosted regression trees with squared loss,
//! exact greedy split finding, L1/L2 leaf regularization,
//! min-child-weight, and missing-value default routing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::panel::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub eta: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub n_rounds: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    /// Tuned values for the sales dataset; n_rounds is selected on the
    /// validation month by the tuner.
    fn default() -> Self {
        GbtParams {
            eta: 0.148,
            max_depth: 6,
            min_child_weight: 26.0,
            lambda: 0.171,
            alpha: 0.170,
            n_rounds: 100,
            gamma: 0.0,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must be in (0,1], got {}", self.eta)));
        }
        if self.max_depth < 1 || self.n_rounds < 1 {
            return Err(Error::Config("max_depth and n_rounds must be >= 1".into()));
        }
        if self.min_child_weight < 0.0 || self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("min_child_weight, lambda, alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// A regression tree node. Leaf weights are stored unshrunk; the
/// ensemble applies shrinkage at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Leaf {
        leaf: f64,
    },
    Internal {
        feat: usize,
        thr: f64,
        default_left: bool,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn output(&self, row: &[f64]) -> f64 {
        match self {
            TreeNode::Leaf { leaf } => *leaf,
            TreeNode::Internal { feat, thr, default_left, left, right } => {
                let v = row[*feat];
                let go_left = if v.is_nan() { *default_left } else { v < *thr };
                if go_left {
                    left.output(row)
                } else {
                    right.output(row)
                }
            }
        }
    }

    fn count_splits(&self, counts: &mut [usize]) {
        if let TreeNode::Internal { feat, left, right, .. } = self {
            counts[*feat] += 1;
            left.count_splits(counts);
            right.count_splits(counts);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub params: GbtParams,
    pub base_score: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<TreeNode>,
}

/// Per-feature split counts (F-score), sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImportance(pub Vec<(String, usize)>);

/// Per-round training (and optional eval) RMSE.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub train_rmse: Vec<f64>,
    pub eval_rmse: Vec<f64>,
}

/// Lasso soft threshold: shrinks g toward zero by alpha.
fn soft_threshold(g: f64, alpha: f64) -> f64 {
    if g > alpha {
        g - alpha
    } else if g < -alpha {
        g + alpha
    } else {
        0.0
    }
}

/// Optimal regularized leaf weight -T_alpha(G) / (H + lambda).
pub fn leaf_weight(g: f64, h: f64, lambda: f64, alpha: f64) -> Result<f64> {
    let denom = h + lambda;
    if denom <= 0.0 {
        return Err(Error::Numeric(format!("leaf weight needs H + lambda > 0, got {denom}")));
    }
    Ok(-soft_threshold(g, alpha) / denom)
}

fn node_score(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    let t = soft_threshold(g, alpha);
    t * t / (h + lambda)
}

/// Regularized split gain. Admissibility (min_child_weight, gain > 0)
/// is enforced by the caller.
pub fn split_gain(
    gl: f64,
    hl: f64,
    gr: f64,
    hr: f64,
    lambda: f64,
    alpha: f64,
    gamma: f64,
) -> f64 {
    0.5 * (node_score(gl, hl, lambda, alpha) + node_score(gr, hr, lambda, alpha)
        - node_score(gl + gr, hl + hr, lambda, alpha))
        - gamma
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SplitCandidate {
    gain: f64,
    feat: usize,
    thr: f64,
    default_left: bool,
}

impl SplitCandidate {
    /// Strict ordering: higher gain wins; ties break to the lowest
    /// feature index, then the lowest threshold, then default-left.
    fn better_than(&self, other: &SplitCandidate) -> bool {
        if self.gain != other.gain {
            return self.gain > other.gain;
        }
        if self.feat != other.feat {
            return self.feat < other.feat;
        }
        if self.thr != other.thr {
            return self.thr < other.thr;
        }
        self.default_left && !other.default_left
    }
}

struct TreeGrower<'a> {
    columns: &'a [Vec<f64>],
    grad: &'a [f64],
    params: &'a GbtParams,
}

impl TreeGrower<'_> {
    fn grow(&self, rows: &[usize], depth: usize) -> TreeNode {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h = rows.len() as f64; // squared loss: every hessian is 1
        let p = self.params;
        let leaf = || TreeNode::Leaf {
            leaf: leaf_weight(g, h, p.lambda, p.alpha).unwrap_or(0.0),
        };
        if depth >= p.max_depth || rows.len() < 2 {
            return leaf();
        }
        let best = (0..self.columns.len())
            .into_par_iter()
            .filter_map(|feat| self.best_split_for_feature(feat, rows, g, h))
            .reduce_with(|a, b| if a.better_than(&b) { a } else { b });
        let Some(best) = best else { return leaf() };
        if best.gain <= 0.0 {
            return leaf();
        }

        let col = &self.columns[best.feat];
        let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
        for &r in rows {
            let v = col[r];
            let go_left = if v.is_nan() { best.default_left } else { v < best.thr };
            if go_left {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        TreeNode::Internal {
            feat: best.feat,
            thr: best.thr,
            default_left: best.default_left,
            left: Box::new(self.grow(&left_rows, depth + 1)),
            right: Box::new(self.grow(&right_rows, depth + 1)),
        }
    }

    /// Exact greedy scan over the sorted distinct values of one
    /// feature, trying both default directions for missing rows.
    fn best_split_for_feature(
        &self,
        feat: usize,
        rows: &[usize],
        g_total: f64,
        h_total: f64,
    ) -> Option<SplitCandidate> {
        let p = self.params;
        let col = &self.columns[feat];
        let mut present: Vec<(f64, f64)> = Vec::with_capacity(rows.len());
        let mut g_miss = 0.0;
        let mut h_miss = 0.0;
        for &r in rows {
            let v = col[r];
            if v.is_nan() {
                g_miss += self.grad[r];
                h_miss += 1.0;
            } else {
                present.push((v, self.grad[r]));
            }
        }
        if present.len() < 2 {
            return None;
        }
        present.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let mut best: Option<SplitCandidate> = None;
        let mut g_left = 0.0;
        let mut h_left = 0.0;
        for i in 0..present.len() - 1 {
            g_left += present[i].1;
            h_left += 1.0;
            let (v, next_v) = (present[i].0, present[i + 1].0);
            if v == next_v {
                continue; // never split between equal values
            }
            let thr = v + (next_v - v) / 2.0;
            for default_left in [true, false] {
                let (gl, hl) = if default_left {
                    (g_left + g_miss, h_left + h_miss)
                } else {
                    (g_left, h_left)
                };
                let gr = g_total - gl;
                let hr = h_total - hl;
                if hl < p.min_child_weight || hr < p.min_child_weight {
                    continue;
                }
                let gain = split_gain(gl, hl, gr, hr, p.lambda, p.alpha, p.gamma);
                let cand = SplitCandidate { gain, feat, thr, default_left };
                if best.map_or(true, |b| cand.better_than(&b)) {
                    best = Some(cand);
                }
            }
        }
        best
    }
}

fn check_matrix(m: &FeatureMatrix, require_target: bool) -> Result<()> {
    if require_target {
        if let Some(t) = m.target.iter().find(|t| !t.is_finite()) {
            return Err(Error::Validation(format!("non-finite target value {t}")));
        }
    }
    for r in 0..m.n_rows() {
        for &v in m.row(r) {
            if v.is_infinite() {
                return Err(Error::Validation("infinite feature value".into()));
            }
        }
    }
    Ok(())
}

fn rmse_of(preds: &[f64], targets: &[f64]) -> f64 {
    let n = preds.len() as f64;
    (preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt()
}

/// Fit `n_rounds` trees by exact greedy depth-wise search.
pub fn fit(
    train: &FeatureMatrix,
    params: &GbtParams,
    eval: Option<&FeatureMatrix>,
) -> Result<(GbtModel, TrainLog)> {
    params.validate()?;
    if train.n_rows() == 0 {
        return Err(Error::Validation("empty training matrix".into()));
    }
    check_matrix(train, true)?;
    if let Some(e) = eval {
        check_matrix(e, true)?;
    }

    let n = train.n_rows();
    let columns: Vec<Vec<f64>> = (0..train.n_features()).map(|c| train.column(c)).collect();
    let base_score = train.target.iter().sum::<f64>() / n as f64;

    let mut preds = vec![base_score; n];
    let mut eval_preds = eval.map(|e| vec![base_score; e.n_rows()]);
    let mut grad = vec![0.0; n];
    let all_rows: Vec<usize> = (0..n).collect();
    let mut trees = Vec::with_capacity(params.n_rounds);
    let mut log = TrainLog::default();

    for _ in 0..params.n_rounds {
        for i in 0..n {
            grad[i] = preds[i] - train.target[i];
        }
        let grower = TreeGrower { columns: &columns, grad: &grad, params };
        let tree = grower.grow(&all_rows, 0);
        for (i, p) in preds.iter_mut().enumerate() {
            *p += params.eta * tree.output(train.row(i));
        }
        log.train_rmse.push(rmse_of(&preds, &train.target));
        if let (Some(e), Some(ep)) = (eval, eval_preds.as_mut()) {
            for (i, p) in ep.iter_mut().enumerate() {
                *p += params.eta * tree.output(e.row(i));
            }
            log.eval_rmse.push(rmse_of(ep, &e.target));
        }
        trees.push(tree);
    }

    let model = GbtModel {
        params: *params,
        base_score,
        feature_names: train.feature_names().to_vec(),
        trees,
    };
    Ok((model, log))
}

/// Raw ensemble predictions: base_score + eta * sum of tree outputs.
/// The rows' features must include every model feature (matched by
/// name, in any order).
pub fn predict(model: &GbtModel, rows: &FeatureMatrix) -> Result<Vec<f64>> {
    let mapping: Vec<usize> = model
        .feature_names
        .iter()
        .map(|name| {
            rows.feature_index(name)
                .ok_or_else(|| Error::Schema { path: "<matrix>".into(), column: name.clone() })
        })
        .collect::<Result<_>>()?;

    let identity = mapping.iter().enumerate().all(|(i, &j)| i == j);
    let mut out = Vec::with_capacity(rows.n_rows());
    let mut buf = vec![0.0; model.feature_names.len()];
    for r in 0..rows.n_rows() {
        let row: &[f64] = if identity {
            rows.row(r)
        } else {
            for (i, &j) in mapping.iter().enumerate() {
                buf[i] = rows.value(r, j);
            }
            &buf
        };
        let sum: f64 = model.trees.iter().map(|t| t.output(row)).sum();
        out.push(model.base_score + model.params.eta * sum);
    }
    Ok(out)
}

/// Split-count (F-score) importance, descending; ties break by name.
pub fn importance(model: &GbtModel) -> FeatureImportance {
    let mut counts = vec![0usize; model.feature_names.len()];
    for tree in &model.trees {
        tree.count_splits(&mut counts);
    }
    let mut pairs: Vec<(String, usize)> = model
        .feature_names
        .iter()
        .cloned()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    FeatureImportance(pairs)
}

impl FeatureImportance {
    pub fn as_map(&self) -> HashMap<&str, usize> {
        self.0.iter().map(|(n, c)| (n.as_str(), *c)).collect()
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|(_, c)| c).sum()
    }
}

pub fn save_model(model: &GbtModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(model)
        .map_err(|e| Error::Validation(format!("serialize model: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GbtModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("parse model {path:?}: {e}")))
}
