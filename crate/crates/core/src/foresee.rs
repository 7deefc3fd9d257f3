//! FORESEE: a forest of sub-sampled decision trees whose leaves estimate
//! how much the error rate differs between the two sensitive groups.
//!
//! Each candidate tree sees a random subset of the training instances
//! (without replacement) and a random subset of the design columns. A
//! candidate is kept only if its accuracy on the training instances it did
//! not see reaches `beta`. The risk of a point is the mean, over kept trees,
//! of `|err_protected - err_unprotected|` in the leaf the point falls into.

use std::io::Write;

use log::warn;
use rand::seq::index;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{self, fit_tree, LeafStats, Samples, TreeModel, TreeParams};
use crate::dataset::{Dataset, DesignMatrix};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Error rate assumed for a group that has no members in a leaf.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentGroupRule {
    /// The absent group is assumed to be always wrong (error rate 1).
    #[default]
    Pessimistic,
    /// The absent group is assumed to match the present one (risk 0).
    Optimistic,
}

/// Which instances populate the leaf group statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafStatistics {
    /// The tree's own sub-sample.
    #[default]
    InSample,
    /// The out-of-subsample remainder of the training rows.
    HeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    /// Trees to retain.
    pub trees: usize,
    pub instance_fraction: f64,
    pub feature_fraction: f64,
    pub beta: f64,
    pub include_sensitive_feature: bool,
    pub tree: TreeParams,
    pub seed: u64,
    pub max_attempts: usize,
    pub absent_group: AbsentGroupRule,
    pub leaf_statistics: LeafStatistics,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 100,
            instance_fraction: 0.6,
            feature_fraction: 0.7,
            beta: 0.55,
            include_sensitive_feature: true,
            tree: TreeParams::default(),
            seed: 0,
            max_attempts: 500,
            absent_group: AbsentGroupRule::Pessimistic,
            leaf_statistics: LeafStatistics::InSample,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.trees < 1 {
            return bad("trees must be at least 1".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.max_attempts < self.trees {
            return bad(format!(
                "max_attempts ({}) must be at least trees ({})",
                self.max_attempts, self.trees
            ));
        }
        for (name, v) in [
            ("instance_fraction", self.instance_fraction),
            ("feature_fraction", self.feature_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if self.tree.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        Ok(())
    }

    /// Columns drawn per tree: `ceil(feature_fraction * width)`, at least one.
    pub fn features_per_tree(&self, width: usize) -> usize {
        ((self.feature_fraction * width as f64).ceil() as usize).clamp(1, width)
    }

    pub fn instances_per_tree(&self, n: usize) -> usize {
        ((self.instance_fraction * n as f64).round() as usize).clamp(1, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedTree {
    pub candidate: usize,
    pub validation_accuracy: f64,
    pub tree: TreeModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub candidate: usize,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<RetainedTree>,
    pub rejected: Vec<RejectedCandidate>,
    pub rejected_count: usize,
    pub attempts: usize,
    pub params: ForestParams,
    /// Design columns the trees index into.
    pub columns: Vec<String>,
}

impl Forest {
    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    /// The design matrix this forest expects for `data`.
    pub fn design_for(&self, data: &Dataset) -> DesignMatrix {
        data.design(self.params.include_sensitive_feature)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

struct Candidate {
    accuracy: f64,
    tree: TreeModel,
}

fn fit_candidate(
    samples: Samples<'_>,
    train: &[usize],
    params: &ForestParams,
    candidate: usize,
) -> Result<Candidate> {
    let mut rng = stream_rng(params.seed, candidate as u64);
    let n = train.len();
    let width = samples.x.n_cols();

    let mut picked: Vec<usize> =
        index::sample(&mut rng, n, params.instances_per_tree(n)).into_vec();
    picked.sort_unstable();
    let mut features: Vec<usize> =
        index::sample(&mut rng, width, params.features_per_tree(width)).into_vec();
    features.sort_unstable();
    let tree_seed = rng.next_u64();

    let instances: Vec<usize> = picked.iter().map(|&p| train[p]).collect();
    let mut in_sample = vec![false; n];
    for &p in &picked {
        in_sample[p] = true;
    }
    let held_out: Vec<usize> = train
        .iter()
        .zip(&in_sample)
        .filter(|(_, &inside)| !inside)
        .map(|(&i, _)| i)
        .collect();

    let mut tree = fit_tree(samples, &instances, &features, &params.tree, tree_seed)?;
    let eval = if held_out.is_empty() {
        &instances
    } else {
        &held_out
    };
    let accuracy = cart::accuracy(&tree, samples, eval)?;
    if params.leaf_statistics == LeafStatistics::HeldOut && !held_out.is_empty() {
        tree.recount_leaves(samples, &held_out);
    }
    Ok(Candidate { accuracy, tree })
}

/// Builds the forest on `train` rows of `data`, encoding the sensitive
/// attribute as a column when the params ask for it.
pub fn build_forest(data: &Dataset, train: &[usize], params: &ForestParams) -> Result<Forest> {
    let x = data.design(params.include_sensitive_feature);
    build_forest_on(Samples::new(data, &x), train, params)
}

pub fn build_forest_on(
    samples: Samples<'_>,
    train: &[usize],
    params: &ForestParams,
) -> Result<Forest> {
    params.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut groups = [false; 2];
    for &i in train {
        groups[samples.sensitive[i] as usize] = true;
    }
    if !groups[0] || !groups[1] {
        return Err(Error::Validation(
            "both sensitive groups must be present in the training set".into(),
        ));
    }
    // Warm the shared column sort before fanning out.
    samples.x.sorted_columns();

    let mut trees = Vec::new();
    let mut rejected = Vec::new();
    let mut attempts = 0usize;
    while trees.len() < params.trees && attempts < params.max_attempts {
        let batch = (params.trees - trees.len()).min(params.max_attempts - attempts);
        let results: Vec<Result<Candidate>> = (attempts..attempts + batch)
            .into_par_iter()
            .map(|c| fit_candidate(samples, train, params, c))
            .collect();
        for (offset, result) in results.into_iter().enumerate() {
            let candidate = attempts + offset;
            let Candidate { accuracy, tree } = result?;
            if accuracy >= params.beta && trees.len() < params.trees {
                trees.push(RetainedTree {
                    candidate,
                    validation_accuracy: accuracy,
                    tree,
                });
            } else {
                rejected.push(RejectedCandidate {
                    candidate,
                    validation_accuracy: accuracy,
                });
            }
        }
        attempts += batch;
    }
    if trees.is_empty() {
        let best_accuracy = rejected
            .iter()
            .map(|r| r.validation_accuracy)
            .fold(0.0, f64::max);
        return Err(Error::BetaTooStrict {
            beta: params.beta,
            attempts,
            best_accuracy,
        });
    }
    if trees.len() < params.trees {
        warn!(
            "retained {} of {} trees after {} attempts",
            trees.len(),
            params.trees,
            attempts
        );
    }
    Ok(Forest {
        rejected_count: rejected.len(),
        trees,
        rejected,
        attempts,
        params: params.clone(),
        columns: samples.x.columns().to_vec(),
    })
}

/// Leaf-level risk: absolute difference of the two groups' error rates.
///
/// With both groups present the difference is formed over integers and
/// divided once, so the result is the correctly rounded exact value and
/// does not depend on which class the leaf predicts.
pub fn leaf_risk(stats: &LeafStats, rule: AbsentGroupRule) -> f64 {
    let [unprotected, protected] = stats.groups;
    match (protected.error_rate(), unprotected.error_rate()) {
        (Some(_), Some(_)) => {
            let cross = |g: &crate::cart::GroupStats, other: &crate::cart::GroupStats| {
                u64::from(g.misclassified) * u64::from(other.count)
            };
            let num = cross(&protected, &unprotected).abs_diff(cross(&unprotected, &protected));
            let den = u64::from(protected.count) * u64::from(unprotected.count);
            num as f64 / den as f64
        }
        (Some(present), None) | (None, Some(present)) => match rule {
            AbsentGroupRule::Pessimistic => (present - 1.0).abs(),
            AbsentGroupRule::Optimistic => 0.0,
        },
        (None, None) => {
            warn!("leaf with no training instances reached; scoring it as risk 1");
            1.0
        }
    }
}

pub fn tree_risk(tree: &TreeModel, x: &[f64], rule: AbsentGroupRule) -> f64 {
    leaf_risk(tree.leaf_stats(x), rule)
}

pub fn foresee_risk(forest: &Forest, x: &[f64]) -> Result<f64> {
    if forest.is_empty() {
        return Err(Error::EmptyForest);
    }
    let rule = forest.params.absent_group;
    let sum: f64 = forest
        .trees
        .iter()
        .map(|t| tree_risk(&t.tree, x, rule))
        .sum();
    Ok(sum / forest.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Foresee,
    Baseline,
}

impl Estimator {
    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Foresee => "foresee",
            Estimator::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    High,
    Low,
}

impl Partition {
    pub fn of(risk: f64, threshold: f64) -> Self {
        if risk > threshold {
            Partition::High
        } else {
            Partition::Low
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Partition::High => "high",
            Partition::Low => "low",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEntry {
    pub row_id: usize,
    pub risk: f64,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub estimator: Estimator,
    pub threshold: f64,
    pub entries: Vec<RiskEntry>,
    /// Per-instance, per-tree risks when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_tree: Option<Vec<Vec<f64>>>,
    /// Estimator settings recorded for provenance.
    pub provenance: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub estimator: Estimator,
    pub threshold: f64,
    pub n: usize,
    pub high: usize,
    pub low: usize,
    pub mean_risk: f64,
    pub histogram: Vec<HistogramBin>,
    pub provenance: serde_json::Value,
}

pub const HISTOGRAM_BINS: usize = 20;

impl RiskReport {
    pub fn new(
        estimator: Estimator,
        threshold: f64,
        rows: &[usize],
        risks: &[f64],
        provenance: serde_json::Value,
    ) -> Result<Self> {
        check_threshold(threshold)?;
        let entries = rows
            .iter()
            .zip(risks)
            .map(|(&row_id, &risk)| RiskEntry {
                row_id,
                risk,
                partition: Partition::of(risk, threshold),
            })
            .collect();
        Ok(RiskReport {
            estimator,
            threshold,
            entries,
            per_tree: None,
            provenance,
        })
    }

    pub fn risks(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.risk).collect()
    }

    pub fn rows_in(&self, partition: Partition) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.partition == partition)
            .map(|e| e.row_id)
            .collect()
    }

    /// Equal-width histogram over [0, 1]; risk 1 falls in the last bin.
    pub fn histogram(&self, bins: usize) -> Vec<HistogramBin> {
        let mut counts = vec![0usize; bins];
        for e in &self.entries {
            let b = ((e.risk * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(b, count)| HistogramBin {
                low: b as f64 / bins as f64,
                high: (b + 1) as f64 / bins as f64,
                count,
            })
            .collect()
    }

    pub fn summary(&self) -> RiskSummary {
        let n = self.entries.len();
        let high = self
            .entries
            .iter()
            .filter(|e| e.partition == Partition::High)
            .count();
        RiskSummary {
            estimator: self.estimator,
            threshold: self.threshold,
            n,
            high,
            low: n - high,
            mean_risk: if n == 0 {
                0.0
            } else {
                self.entries.iter().map(|e| e.risk).sum::<f64>() / n as f64
            },
            histogram: self.histogram(HISTOGRAM_BINS),
            provenance: self.provenance.clone(),
        }
    }

    /// `row_id,risk,partition`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row_id", "risk", "partition"])?;
        for e in &self.entries {
            w.write_record([
                e.row_id.to_string(),
                e.risk.to_string(),
                e.partition.label().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "risk threshold must lie in [0, 1], got {threshold}"
        )))
    }
}

/// Scores `indices` of `data` and partitions them at `threshold`.
pub fn score_dataset(
    forest: &Forest,
    data: &Dataset,
    indices: &[usize],
    threshold: f64,
) -> Result<RiskReport> {
    check_threshold(threshold)?;
    let x = forest.design_for(data);
    score_design(forest, &x, indices, threshold)
}

pub fn score_design(
    forest: &Forest,
    x: &DesignMatrix,
    indices: &[usize],
    threshold: f64,
) -> Result<RiskReport> {
    if forest.is_empty() {
        return Err(Error::EmptyForest);
    }
    let risks: Vec<f64> = indices
        .par_iter()
        .map(|&i| foresee_risk(forest, x.row(i)))
        .collect::<Result<_>>()?;
    RiskReport::new(
        Estimator::Foresee,
        threshold,
        indices,
        &risks,
        forest_provenance(forest),
    )
}

/// Per-tree risks for each of `indices`.
pub fn per_tree_risks(forest: &Forest, x: &DesignMatrix, indices: &[usize]) -> Vec<Vec<f64>> {
    let rule = forest.params.absent_group;
    indices
        .par_iter()
        .map(|&i| {
            forest
                .trees
                .iter()
                .map(|t| tree_risk(&t.tree, x.row(i), rule))
                .collect()
        })
        .collect()
}

fn forest_provenance(forest: &Forest) -> serde_json::Value {
    serde_json::json!({
        "params": forest.params,
        "retained_trees": forest.len(),
        "rejected_trees": forest.rejected_count,
        "attempts": forest.attempts,
        "mean_validation_accuracy": forest.trees.iter().map(|t| t.validation_accuracy).sum::<f64>()
            / forest.len().max(1) as f64,
    })
}
