//! Risk-guided mitigation.
//!
//! Pre-processing drops instances whose risk exceeds λ from training and/or
//! evaluation. Post-processing keeps every instance but re-thresholds the
//! high-risk ones with a separate cut-off per sensitive group, chosen by
//! exhaustive grid search under a fairness constraint.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::classifiers::{
    fit_classifier, ClassifierKind, ClassifierModel, ClassifierParams, Metric,
};
use crate::dataset::{split_subset, Dataset, SplitPair, PROTECTED, UNPROTECTED};
use crate::error::{Error, Result};
use crate::fairness::{FairnessMetrics, OddsAggregation};
use crate::foresee::check_threshold;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No mitigation; the reference row.
    Original,
    PreTrainAndTest,
    PreTestOnly,
    PostDemP,
    PostEqOdd,
    PostEqOpp,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Original,
        Strategy::PreTrainAndTest,
        Strategy::PreTestOnly,
        Strategy::PostDemP,
        Strategy::PostEqOdd,
        Strategy::PostEqOpp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Original => "original",
            Strategy::PreTrainAndTest => "pre_train_and_test",
            Strategy::PreTestOnly => "pre_test_only",
            Strategy::PostDemP => "post_demP",
            Strategy::PostEqOdd => "post_eqODD",
            Strategy::PostEqOpp => "post_eqOPP",
        }
    }

    /// Row label used in mitigation tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Original => "original",
            Strategy::PreTrainAndTest => "pre-processing (train&test)",
            Strategy::PreTestOnly => "pre-processing (test)",
            Strategy::PostDemP => "post-processing (demP)",
            Strategy::PostEqOdd => "post-processing (eqODD)",
            Strategy::PostEqOpp => "post-processing (eqOPP)",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.tag().eq_ignore_ascii_case(s) || st.label() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown mitigation strategy '{s}'")))
    }

    pub fn filter_mode(self) -> Option<FilterMode> {
        match self {
            Strategy::PreTrainAndTest => Some(FilterMode::TrainAndTest),
            Strategy::PreTestOnly => Some(FilterMode::TestOnly),
            _ => None,
        }
    }

    pub fn constraint(self) -> Option<Constraint> {
        match self {
            Strategy::PostDemP => Some(Constraint::DemographicParity),
            Strategy::PostEqOdd => Some(Constraint::EqualizedOdds),
            Strategy::PostEqOpp => Some(Constraint::EqualOpportunity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    TrainAndTest,
    TestOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    DemographicParity,
    EqualizedOdds,
    EqualOpportunity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationPlan {
    pub strategy: Strategy,
    pub lambda: f64,
    /// Largest admissible constraint value for post-processing.
    pub epsilon: f64,
    pub grid_step: f64,
    /// Share of the training split held out to fit post-processing thresholds.
    pub validation_fraction: f64,
    pub odds: OddsAggregation,
    pub seed: u64,
}

impl MitigationPlan {
    pub fn new(strategy: Strategy, lambda: f64) -> Self {
        MitigationPlan {
            strategy,
            lambda,
            epsilon: 0.02,
            grid_step: 0.01,
            validation_fraction: 0.2,
            odds: OddsAggregation::Mean,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_threshold(self.lambda)?;
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        grid_size(self.grid_step)?;
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Number of grid intervals; the grid is `{0, 1/k, ..., 1}`.
fn grid_size(step: f64) -> Result<usize> {
    let k = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || (k * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "grid step must divide 1 evenly, got {step}"
        )));
    }
    Ok(k as usize)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub removed_train: usize,
    pub removed_test: usize,
}

fn keep_low(rows: &[usize], risks: &[f64], lambda: f64) -> Result<Vec<usize>> {
    if rows.len() != risks.len() {
        return Err(Error::InvalidParameter(format!(
            "{} risks for {} rows",
            risks.len(),
            rows.len()
        )));
    }
    Ok(rows
        .iter()
        .zip(risks)
        .filter(|(_, &r)| r <= lambda)
        .map(|(&i, _)| i)
        .collect())
}

fn check_nonempty(data: &Dataset, rows: &[usize], which: &str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Validation(format!(
            "filtering emptied the {which} split"
        )));
    }
    let [u, p] = data.group_counts(rows);
    if u == 0 || p == 0 {
        let group = if p == 0 { "protected" } else { "unprotected" };
        return Err(Error::Validation(format!(
            "filtering removed every {group} instance from the {which} split"
        )));
    }
    Ok(())
}

/// Drops rows with risk above `lambda`. Risks are aligned with
/// `split.train` and `split.test`; `TestOnly` never touches training rows.
pub fn preprocess_filter(
    data: &Dataset,
    split: &SplitPair,
    train_risks: &[f64],
    test_risks: &[f64],
    lambda: f64,
    mode: FilterMode,
) -> Result<FilterOutcome> {
    check_threshold(lambda)?;
    let test = keep_low(&split.test, test_risks, lambda)?;
    let train = match mode {
        FilterMode::TrainAndTest => keep_low(&split.train, train_risks, lambda)?,
        FilterMode::TestOnly => split.train.clone(),
    };
    check_nonempty(data, &train, "training")?;
    check_nonempty(data, &test, "evaluation")?;
    Ok(FilterOutcome {
        removed_train: split.train.len() - train.len(),
        removed_test: split.test.len() - test.len(),
        train,
        test,
    })
}

/// Result of the per-group threshold search. Arrays are indexed by group id
/// (`[unprotected, protected]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub thresholds: [f64; 2],
    pub grid_index: [usize; 2],
    pub error_rate: f64,
    pub constraint_value: f64,
    /// False when no pair met ε; the pair then minimizes the constraint.
    pub feasible: bool,
}

/// `counts[g][c][i]`: instances of group `g`, label `c` with score >= i/k.
fn grid_counts(scores: &[f64], labels: &[u8], sensitive: &[u8], k: usize) -> [[Vec<usize>; 2]; 2] {
    let mut sorted: [[Vec<f64>; 2]; 2] = Default::default();
    for ((&s, &y), &g) in scores.iter().zip(labels).zip(sensitive) {
        sorted[g as usize][y as usize].push(s);
    }
    sorted.map(|by_label| {
        by_label.map(|mut v| {
            v.sort_by(f64::total_cmp);
            (0..=k)
                .map(|i| {
                    let t = grid_value(i, k);
                    v.len() - v.partition_point(|&s| s < t)
                })
                .collect()
        })
    })
}

fn grid_value(i: usize, k: usize) -> f64 {
    i as f64 / k as f64
}

/// Lexicographic preference among pairs of equal standing: fewer errors,
/// then closer thresholds, then closer to 1/2, then a lower protected
/// threshold.
fn preference(errors: usize, i: usize, j: usize, k: usize) -> (usize, usize, usize, usize) {
    (
        errors,
        i.abs_diff(j),
        (2 * i).abs_diff(k) + (2 * j).abs_diff(k),
        i,
    )
}

/// Grid search over `(t_protected, t_unprotected)`; an instance is predicted
/// positive when its score is at least its group's threshold.
pub fn search_thresholds(
    scores: &[f64],
    labels: &[u8],
    sensitive: &[u8],
    constraint: Constraint,
    epsilon: f64,
    grid_step: f64,
    odds: OddsAggregation,
) -> Result<ThresholdChoice> {
    let k = grid_size(grid_step)?;
    if scores.len() != labels.len() || scores.len() != sensitive.len() {
        return Err(Error::InvalidParameter(
            "scores, labels and groups differ in length".into(),
        ));
    }
    let c = grid_counts(scores, labels, sensitive, k);
    let size = |g: usize, y: usize| c[g][y][0];
    let n = [size(0, 0) + size(0, 1), size(1, 0) + size(1, 1)];
    for (g, name) in [(UNPROTECTED, "unprotected"), (PROTECTED, "protected")] {
        let g = g as usize;
        if n[g] == 0 {
            return Err(Error::UndefinedMetric(format!("{name} group is empty")));
        }
        let needs_pos = constraint != Constraint::DemographicParity;
        if needs_pos && size(g, 1) == 0 {
            return Err(Error::UndefinedMetric(format!(
                "{name} group has no positive labels"
            )));
        }
        if constraint == Constraint::EqualizedOdds && size(g, 0) == 0 {
            return Err(Error::UndefinedMetric(format!(
                "{name} group has no negative labels"
            )));
        }
    }
    let p = PROTECTED as usize;
    let u = UNPROTECTED as usize;
    let rate = |num: usize, den: usize| num as f64 / den as f64;
    let total = n[0] + n[1];

    // (key, constraint, i, j) for the best feasible pair and the
    // least-violating pair.
    let mut best: Option<((usize, usize, usize, usize), f64, usize, usize)> = None;
    let mut fallback: Option<(f64, (usize, usize, usize, usize), usize, usize)> = None;
    for i in 0..=k {
        for j in 0..=k {
            let (tp_p, fp_p) = (c[p][1][i], c[p][0][i]);
            let (tp_u, fp_u) = (c[u][1][j], c[u][0][j]);
            let errors = (size(p, 1) - tp_p) + fp_p + (size(u, 1) - tp_u) + fp_u;
            let value = match constraint {
                Constraint::DemographicParity => {
                    (rate(tp_p + fp_p, n[p]) - rate(tp_u + fp_u, n[u])).abs()
                }
                Constraint::EqualOpportunity => {
                    (rate(tp_p, size(p, 1)) - rate(tp_u, size(u, 1))).abs()
                }
                Constraint::EqualizedOdds => {
                    let tpr = (rate(tp_p, size(p, 1)) - rate(tp_u, size(u, 1))).abs();
                    let fpr = (rate(fp_p, size(p, 0)) - rate(fp_u, size(u, 0))).abs();
                    match odds {
                        OddsAggregation::Mean => 0.5 * (tpr + fpr),
                        OddsAggregation::Max => tpr.max(fpr),
                    }
                }
            };
            let key = preference(errors, i, j, k);
            if value <= epsilon && best.as_ref().is_none_or(|b| key < b.0) {
                best = Some((key, value, i, j));
            }
            let worse = fallback
                .as_ref()
                .is_none_or(|f| value < f.0 || (value == f.0 && key < f.1));
            if worse {
                fallback = Some((value, key, i, j));
            }
        }
    }
    let (errors, value, i, j, feasible) = match best {
        Some((key, value, i, j)) => (key.0, value, i, j, true),
        None => {
            let (value, key, i, j) = fallback.expect("grid is non-empty");
            (key.0, value, i, j, false)
        }
    };
    let mut thresholds = [0.0; 2];
    let mut grid_index = [0; 2];
    thresholds[p] = grid_value(i, k);
    thresholds[u] = grid_value(j, k);
    grid_index[p] = i;
    grid_index[u] = j;
    Ok(ThresholdChoice {
        thresholds,
        grid_index,
        error_rate: rate(errors, total),
        constraint_value: value,
        feasible,
    })
}

/// Group thresholds for flagged instances, `default` for the rest.
pub fn apply_thresholds(
    scores: &[f64],
    sensitive: &[u8],
    flagged: &[bool],
    thresholds: [f64; 2],
    default: f64,
) -> Vec<u8> {
    scores
        .iter()
        .zip(sensitive)
        .zip(flagged)
        .map(|((&s, &g), &f)| {
            let t = if f { thresholds[g as usize] } else { default };
            u8::from(s >= t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostProcessOutcome {
    pub choice: ThresholdChoice,
    /// Aligned with the evaluation rows.
    pub predictions: Vec<u8>,
}

/// Fits group thresholds on `fit_rows` and applies them to the flagged
/// evaluation rows; unflagged rows keep the model's own threshold.
pub fn postprocess_thresholds(
    model: &ClassifierModel,
    data: &Dataset,
    fit_rows: &[usize],
    eval_rows: &[usize],
    eval_flagged: &[bool],
    constraint: Constraint,
    plan: &MitigationPlan,
) -> Result<PostProcessOutcome> {
    plan.validate()?;
    if eval_rows.len() != eval_flagged.len() {
        return Err(Error::InvalidParameter(
            "flags must align with evaluation rows".into(),
        ));
    }
    let fit_scores = model.scores(data, fit_rows);
    let labels: Vec<u8> = fit_rows.iter().map(|&r| data.labels[r]).collect();
    let groups: Vec<u8> = fit_rows.iter().map(|&r| data.sensitive[r]).collect();
    let choice = search_thresholds(
        &fit_scores,
        &labels,
        &groups,
        constraint,
        plan.epsilon,
        plan.grid_step,
        plan.odds,
    )?;
    if !choice.feasible {
        warn!(
            "no threshold pair meets epsilon={}; using the least-violating pair ({:.4})",
            plan.epsilon, choice.constraint_value
        );
    }
    let scores = model.scores(data, eval_rows);
    let groups: Vec<u8> = eval_rows.iter().map(|&r| data.sensitive[r]).collect();
    let predictions = apply_thresholds(
        &scores,
        &groups,
        eval_flagged,
        choice.thresholds,
        model.threshold,
    );
    Ok(PostProcessOutcome {
        choice,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MitigationResult {
    pub strategy: Strategy,
    pub classifier: ClassifierKind,
    pub metrics: FairnessMetrics,
    pub training_rows: usize,
    pub evaluation_rows: usize,
    pub removed_train: usize,
    pub removed_test: usize,
    /// Training rows held out to fit post-processing thresholds.
    pub validation_rows: usize,
    pub thresholds: Option<ThresholdChoice>,
}

/// Runs one strategy end to end: trains `kind` on the (possibly filtered or
/// reduced) training split and evaluates it on the test split. Risks are
/// aligned with `split.train` and `split.test`.
#[allow(clippy::too_many_arguments)]
pub fn mitigate(
    data: &Dataset,
    split: &SplitPair,
    train_risks: &[f64],
    test_risks: &[f64],
    kind: ClassifierKind,
    params: &ClassifierParams,
    plan: &MitigationPlan,
    metric: Metric,
) -> Result<MitigationResult> {
    plan.validate()?;
    if split.train.len() != train_risks.len() || split.test.len() != test_risks.len() {
        return Err(Error::InvalidParameter(
            "risks must align with the split".into(),
        ));
    }
    let evaluate = |model: &ClassifierModel, rows: &[usize], preds: Option<Vec<u8>>| {
        let preds = preds.unwrap_or_else(|| model.predictions(data, rows));
        let labels: Vec<u8> = rows.iter().map(|&r| data.labels[r]).collect();
        let groups: Vec<u8> = rows.iter().map(|&r| data.sensitive[r]).collect();
        FairnessMetrics::compute(&preds, &labels, &groups, metric, plan.odds)
    };
    let mut result = MitigationResult {
        strategy: plan.strategy,
        classifier: kind,
        metrics: FairnessMetrics::compute(&[], &[], &[], metric, plan.odds)?,
        training_rows: split.train.len(),
        evaluation_rows: split.test.len(),
        removed_train: 0,
        removed_test: 0,
        validation_rows: 0,
        thresholds: None,
    };
    if let Some(mode) = plan.strategy.filter_mode() {
        let kept = preprocess_filter(data, split, train_risks, test_risks, plan.lambda, mode)?;
        let model = fit_classifier(data, &kept.train, kind, params)?;
        result.metrics = evaluate(&model, &kept.test, None)?;
        result.training_rows = kept.train.len();
        result.evaluation_rows = kept.test.len();
        result.removed_train = kept.removed_train;
        result.removed_test = kept.removed_test;
    } else if let Some(constraint) = plan.strategy.constraint() {
        let slice = split_subset(
            data,
            &split.train,
            1.0 - plan.validation_fraction,
            plan.seed,
        )?;
        let risk_of: std::collections::HashMap<usize, f64> = split
            .train
            .iter()
            .copied()
            .zip(train_risks.iter().copied())
            .collect();
        let fit_rows: Vec<usize> = slice
            .test
            .iter()
            .copied()
            .filter(|r| risk_of[r] > plan.lambda)
            .collect();
        let model = fit_classifier(data, &slice.train, kind, params)?;
        let flagged: Vec<bool> = test_risks.iter().map(|&r| r > plan.lambda).collect();
        let outcome = postprocess_thresholds(
            &model,
            data,
            &fit_rows,
            &split.test,
            &flagged,
            constraint,
            plan,
        )?;
        result.metrics = evaluate(&model, &split.test, Some(outcome.predictions))?;
        result.training_rows = slice.train.len();
        result.validation_rows = slice.test.len();
        result.thresholds = Some(outcome.choice);
    } else {
        let model = fit_classifier(data, &split.train, kind, params)?;
        result.metrics = evaluate(&model, &split.test, None)?;
    }
    Ok(result)
}
