//! Response-surface baseline: a least-squares boosted tree ensemble fit to
//! `E[Y | X, S]` with the sensitive attribute as an input column. The risk of
//! a point is how much the fitted response moves when only the sensitive
//! column is flipped.
//!
//! This plays the role of a Bayesian additive tree model; it is a boosted
//! ensemble, not an MCMC sampler, and is tagged `baseline` in every report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::grow::{self, Criterion, GrowParams, RawNode};
use crate::dataset::{Dataset, DesignMatrix};
use crate::error::{Error, Result};
use crate::foresee::{check_threshold, Estimator, RiskReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            rounds: 200,
            learning_rate: 0.1,
            max_depth: 3,
            min_leaf: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegressionNode {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<RegressionNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                RegressionNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                RegressionNode::Leaf { value } => return *value,
            }
        }
    }

    pub fn splits_on(&self, column: usize) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n, RegressionNode::Internal { feature, .. } if *feature == column))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    pub base_rate: f64,
    pub learning_rate: f64,
    pub rounds: usize,
    pub trees: Vec<RegressionTree>,
    pub sensitive_column: usize,
    pub columns: Vec<String>,
    /// Training mean squared error of the raw (unclamped) ensemble after
    /// each round, starting with the constant model.
    pub training_mse: Vec<f64>,
    pub params: BoostParams,
}

impl AdditiveModel {
    fn raw(&self, x: &[f64]) -> f64 {
        self.base_rate + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    /// Fitted response clamped to [0, 1].
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.raw(x).clamp(0.0, 1.0)
    }

    /// Response at `x` with the sensitive column forced to `group`.
    pub fn predict_for_group(&self, x: &[f64], group: u8) -> f64 {
        let mut row = x.to_vec();
        row[self.sensitive_column] = group as f64;
        self.predict(&row)
    }
}

#[derive(Clone, Copy, Default)]
struct SseStats {
    count: u32,
    sum: f64,
    sum_sq: f64,
}

struct Squared<'a> {
    target: &'a [f64],
}

impl Criterion for Squared<'_> {
    type Stats = SseStats;

    fn add(&self, s: &mut SseStats, row: usize, mult: u32) {
        let m = mult as f64;
        let t = self.target[row];
        s.count += mult;
        s.sum += m * t;
        s.sum_sq += m * t * t;
    }

    fn sub(&self, total: &SseStats, part: &SseStats) -> SseStats {
        SseStats {
            count: total.count - part.count,
            sum: total.sum - part.sum,
            sum_sq: total.sum_sq - part.sum_sq,
        }
    }

    fn count(&self, s: &SseStats) -> u32 {
        s.count
    }

    fn weighted_impurity(&self, s: &SseStats) -> f64 {
        if s.count == 0 {
            return 0.0;
        }
        (s.sum_sq - s.sum * s.sum / s.count as f64).max(0.0)
    }

    fn is_pure(&self, s: &SseStats) -> bool {
        self.weighted_impurity(s) <= 1e-12 * s.count.max(1) as f64
    }
}

fn fit_regression_tree(
    x: &DesignMatrix,
    mult: &[u32],
    features: &[usize],
    target: &[f64],
    params: &BoostParams,
    rng: &mut ChaCha8Rng,
) -> RegressionTree {
    let grown = grow::grow(
        x,
        mult,
        features,
        &Squared { target },
        GrowParams {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf,
            per_node_features: None,
        },
        rng,
    );
    let nodes = grown
        .nodes
        .into_iter()
        .map(|raw| match raw {
            RawNode::Split {
                feature,
                threshold,
                left,
                right,
            } => RegressionNode::Internal {
                feature,
                threshold,
                left,
                right,
            },
            RawNode::Leaf { stats } => RegressionNode::Leaf {
                value: if stats.count == 0 {
                    0.0
                } else {
                    stats.sum / stats.count as f64
                },
            },
        })
        .collect();
    RegressionTree { nodes }
}

/// Stagewise least-squares boosting on `train`. The sensitive attribute is
/// always an input column so one model covers both groups.
pub fn fit_additive(
    data: &Dataset,
    train: &[usize],
    params: &BoostParams,
) -> Result<AdditiveModel> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    if params.rounds == 0 || params.max_depth == 0 {
        return Err(Error::InvalidParameter(
            "rounds and max_depth must be at least 1".into(),
        ));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "learning_rate must lie in (0, 1], got {}",
            params.learning_rate
        )));
    }
    let x = data.design(true);
    let sensitive_column = x
        .sensitive_column()
        .expect("design built with sensitive column");
    let mut mult = vec![0u32; x.n_rows()];
    for &i in train {
        mult[i] += 1;
    }
    let features: Vec<usize> = (0..x.n_cols()).collect();
    let n = train.len() as f64;
    let base_rate = train.iter().map(|&i| data.labels[i] as f64).sum::<f64>() / n;

    let mut raw = vec![base_rate; x.n_rows()];
    let mut residual = vec![0.0; x.n_rows()];
    let mse = |raw: &[f64]| -> f64 {
        train
            .iter()
            .map(|&i| (data.labels[i] as f64 - raw[i]).powi(2))
            .sum::<f64>()
            / n
    };
    let mut training_mse = vec![mse(&raw)];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trees = Vec::with_capacity(params.rounds);
    for _ in 0..params.rounds {
        for &i in train {
            residual[i] = data.labels[i] as f64 - raw[i];
        }
        let tree = fit_regression_tree(&x, &mult, &features, &residual, params, &mut rng);
        for &i in train {
            raw[i] += params.learning_rate * tree.predict(x.row(i));
        }
        training_mse.push(mse(&raw));
        trees.push(tree);
    }

    Ok(AdditiveModel {
        base_rate,
        learning_rate: params.learning_rate,
        rounds: params.rounds,
        trees,
        sensitive_column,
        columns: x.columns().to_vec(),
        training_mse,
        params: params.clone(),
    })
}

/// `|f(x, s=1) - f(x, s=0)|` with both responses clamped to [0, 1]. `x` is a
/// design row that includes the sensitive column.
pub fn baseline_risk(model: &AdditiveModel, x: &[f64]) -> f64 {
    (model.predict_for_group(x, 1) - model.predict_for_group(x, 0)).abs()
}

pub fn score_baseline(
    model: &AdditiveModel,
    data: &Dataset,
    indices: &[usize],
    threshold: f64,
) -> Result<RiskReport> {
    check_threshold(threshold)?;
    let x = data.design(true);
    let risks: Vec<f64> = indices
        .par_iter()
        .map(|&i| baseline_risk(model, x.row(i)))
        .collect();
    RiskReport::new(
        Estimator::Baseline,
        threshold,
        indices,
        &risks,
        serde_json::json!({ "params": model.params, "trees": model.trees.len() }),
    )
}
