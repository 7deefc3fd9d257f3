//! Group fairness gaps over binary predictions, the report that collects
//! them, and exact checks of the risk/unfairness relations on discrete
//! grids.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifiers::{score_metric, Metric};
use crate::dataset::{PROTECTED, UNPROTECTED};
use crate::error::{Error, Result};
use crate::synthetic::GridDgp;

fn group_name(g: u8) -> &'static str {
    if g == PROTECTED {
        "protected"
    } else {
        "unprotected"
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl GroupConfusion {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positive_rate(&self) -> Option<f64> {
        ratio(self.tp + self.fp, self.n())
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn error_rate(&self) -> Option<f64> {
        ratio(self.fp + self.fn_, self.n())
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

fn check_aligned(preds: &[u8], other: &[u8]) -> Result<()> {
    if preds.len() != other.len() {
        return Err(Error::InvalidParameter(format!(
            "misaligned inputs: {} predictions vs {} values",
            preds.len(),
            other.len()
        )));
    }
    Ok(())
}

/// Confusion matrices indexed by group id (`[unprotected, protected]`).
pub fn confusion(preds: &[u8], labels: &[u8], sensitive: &[u8]) -> Result<[GroupConfusion; 2]> {
    check_aligned(preds, labels)?;
    check_aligned(preds, sensitive)?;
    let mut out = [GroupConfusion::default(); 2];
    for ((&p, &y), &s) in preds.iter().zip(labels).zip(sensitive) {
        let c = &mut out[s as usize];
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(out)
}

fn rate_gap(
    cm: &[GroupConfusion; 2],
    rate: impl Fn(&GroupConfusion) -> Option<f64>,
    what: &str,
) -> Result<f64> {
    let get = |g: u8| {
        rate(&cm[g as usize]).ok_or_else(|| {
            Error::UndefinedMetric(format!(
                "{what} undefined: no eligible instances in the {} group",
                group_name(g)
            ))
        })
    };
    Ok((get(PROTECTED)? - get(UNPROTECTED)?).abs())
}

/// `|P(yhat=1 | s) - P(yhat=1 | not s)|`.
pub fn demographic_parity_gap(preds: &[u8], sensitive: &[u8]) -> Result<f64> {
    check_aligned(preds, sensitive)?;
    let mut counts = [[0usize; 2]; 2];
    for (&p, &s) in preds.iter().zip(sensitive) {
        counts[s as usize][0] += 1;
        counts[s as usize][1] += usize::from(p == 1);
    }
    let rate = |g: u8| {
        let [n, pos] = counts[g as usize];
        ratio(pos, n)
            .ok_or_else(|| Error::UndefinedMetric(format!("the {} group is empty", group_name(g))))
    };
    Ok((rate(PROTECTED)? - rate(UNPROTECTED)?).abs())
}

/// Absolute true-positive-rate difference.
pub fn equal_opportunity_gap(preds: &[u8], labels: &[u8], sensitive: &[u8]) -> Result<f64> {
    let cm = confusion(preds, labels, sensitive)?;
    rate_gap(&cm, GroupConfusion::tpr, "true positive rate")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OddsAggregation {
    /// Mean of the TPR and FPR gaps.
    #[default]
    Mean,
    /// Larger of the two gaps.
    Max,
}

pub fn equalized_odds_gap(preds: &[u8], labels: &[u8], sensitive: &[u8]) -> Result<f64> {
    equalized_odds_gap_with(preds, labels, sensitive, OddsAggregation::Mean)
}

pub fn equalized_odds_gap_with(
    preds: &[u8],
    labels: &[u8],
    sensitive: &[u8],
    aggregation: OddsAggregation,
) -> Result<f64> {
    let cm = confusion(preds, labels, sensitive)?;
    let tpr = rate_gap(&cm, GroupConfusion::tpr, "true positive rate")?;
    let fpr = rate_gap(&cm, GroupConfusion::fpr, "false positive rate")?;
    Ok(match aggregation {
        OddsAggregation::Mean => (tpr + fpr) / 2.0,
        OddsAggregation::Max => tpr.max(fpr),
    })
}

/// Absolute difference of group error rates.
pub fn misclassification_gap(preds: &[u8], labels: &[u8], sensitive: &[u8]) -> Result<f64> {
    let cm = confusion(preds, labels, sensitive)?;
    rate_gap(&cm, GroupConfusion::error_rate, "error rate")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubpopSpec {
    /// Minimum mass fraction of the evaluation set.
    pub gamma: f64,
}

impl SubpopSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (0, 1], got {gamma}"
            )));
        }
        Ok(SubpopSpec { gamma })
    }

    pub fn size(&self, n: usize) -> usize {
        ((self.gamma * n as f64).ceil() as usize).clamp(1, n.max(1))
    }

    /// Positions of the `ceil(gamma n)` highest risks; equal risks are taken
    /// in position order.
    pub fn select(&self, risks: &[f64]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..risks.len()).collect();
        order.sort_by(|&a, &b| risks[b].total_cmp(&risks[a]).then(a.cmp(&b)));
        order.truncate(self.size(risks.len()));
        order.sort_unstable();
        order
    }
}

/// Misclassification gap over the top-`gamma` instances by risk.
pub fn subpop_misclassification_gap(
    preds: &[u8],
    labels: &[u8],
    sensitive: &[u8],
    risks: &[f64],
    spec: SubpopSpec,
) -> Result<f64> {
    check_aligned(preds, labels)?;
    check_aligned(preds, sensitive)?;
    if risks.len() != preds.len() {
        return Err(Error::InvalidParameter(
            "risks must align with predictions".into(),
        ));
    }
    let pick = spec.select(risks);
    let sel = |v: &[u8]| pick.iter().map(|&i| v[i]).collect::<Vec<u8>>();
    misclassification_gap(&sel(preds), &sel(labels), &sel(sensitive))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetrics {
    pub n: usize,
    pub group_sizes: [usize; 2],
    pub performance: Option<f64>,
    pub demographic_parity: Option<f64>,
    pub equal_opportunity: Option<f64>,
    pub equalized_odds: Option<f64>,
    pub misclassification: Option<f64>,
    /// `[unprotected, protected]`.
    pub confusion: [GroupConfusion; 2],
    /// Why a metric is absent, if any is.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl FairnessMetrics {
    /// Every metric that cannot be computed is left absent with a note.
    pub fn compute(
        preds: &[u8],
        labels: &[u8],
        sensitive: &[u8],
        metric: Metric,
        odds: OddsAggregation,
    ) -> Result<Self> {
        let cm = confusion(preds, labels, sensitive)?;
        let mut notes = Vec::new();
        let mut keep = |r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(m)) => {
                notes.push(m);
                None
            }
            Err(e) => {
                notes.push(e.to_string());
                None
            }
        };
        let performance = if preds.is_empty() {
            None
        } else {
            keep(score_metric(metric, preds, labels))
        };
        let demographic_parity = keep(demographic_parity_gap(preds, sensitive));
        let equal_opportunity = keep(rate_gap(&cm, GroupConfusion::tpr, "true positive rate"));
        let equalized_odds = keep(equalized_odds_gap_with(preds, labels, sensitive, odds));
        let misclassification = keep(rate_gap(&cm, GroupConfusion::error_rate, "error rate"));
        notes.dedup();
        Ok(FairnessMetrics {
            n: preds.len(),
            group_sizes: [cm[0].n(), cm[1].n()],
            performance,
            demographic_parity,
            equal_opportunity,
            equalized_odds,
            misclassification,
            confusion: cm,
            notes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub classifier: String,
    pub strategy: String,
    /// `all`, `high`, `low` or `top_gamma`.
    pub subset: String,
    pub metrics: FairnessMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub dataset: String,
    pub performance_metric: Metric,
    pub odds_aggregation: OddsAggregation,
    /// Risk threshold splitting High from Low, when subsets are risk based.
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub entries: Vec<ReportEntry>,
    #[serde(default)]
    pub classifiers: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl FairnessReport {
    pub fn new(dataset: &str, metric: Metric, odds: OddsAggregation) -> Self {
        FairnessReport {
            dataset: dataset.to_string(),
            performance_metric: metric,
            odds_aggregation: odds,
            lambda: None,
            gamma: None,
            entries: Vec::new(),
            classifiers: BTreeMap::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn push(
        &mut self,
        classifier: &str,
        strategy: &str,
        subset: &str,
        metrics: FairnessMetrics,
    ) {
        self.entries.push(ReportEntry {
            classifier: classifier.to_string(),
            strategy: strategy.to_string(),
            subset: subset.to_string(),
            metrics,
        });
    }

    pub fn get(&self, classifier: &str, strategy: &str, subset: &str) -> Option<&FairnessMetrics> {
        self.entries
            .iter()
            .find(|e| e.classifier == classifier && e.strategy == strategy && e.subset == subset)
            .map(|e| &e.metrics)
    }

    /// Nested `classifier -> strategy -> subset -> metrics` view.
    pub fn to_json(&self) -> Result<String> {
        let mut nested: BTreeMap<&str, BTreeMap<&str, BTreeMap<&str, &FairnessMetrics>>> =
            BTreeMap::new();
        for e in &self.entries {
            nested
                .entry(&e.classifier)
                .or_default()
                .entry(&e.strategy)
                .or_default()
                .insert(&e.subset, &e.metrics);
        }
        let doc = serde_json::json!({
            "dataset": self.dataset,
            "performance_metric": self.performance_metric,
            "odds_aggregation": self.odds_aggregation,
            "lambda": self.lambda,
            "gamma": self.gamma,
            "classifiers": self.classifiers,
            "results": nested,
            "extra": self.extra,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "classifier",
        "strategy",
        "subset",
        "n",
        "n_unprotected",
        "n_protected",
        "performance",
        "demographic_parity",
        "equal_opportunity",
        "equalized_odds",
        "misclassification",
    ];

    /// One row per entry; absent metrics are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.entries {
            let m = &e.metrics;
            w.write_record([
                e.classifier.clone(),
                e.strategy.clone(),
                e.subset.clone(),
                m.n.to_string(),
                m.group_sizes[0].to_string(),
                m.group_sizes[1].to_string(),
                opt(m.performance),
                opt(m.demographic_parity),
                opt(m.equal_opportunity),
                opt(m.equalized_odds),
                opt(m.misclassification),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<fairness csv>", e))?;
        Ok(())
    }
}

/// Error probability at a cell for a classifier predicting 1 with
/// probability `g` when the positive-label probability is `eta`.
pub fn cell_error(eta: f64, g: f64) -> f64 {
    g * (1.0 - eta) + (1.0 - g) * eta
}

fn check_classifier(dgp: &GridDgp, g: &[f64]) -> Result<()> {
    if g.len() != dgp.cells() {
        return Err(Error::InvalidParameter(format!(
            "classifier table has {} cells, grid has {}",
            g.len(),
            dgp.cells()
        )));
    }
    if g.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParameter(
            "classifier probabilities must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Largest `|delta_mis(x) - r(x)|` over the grid for a deterministic
/// classifier, with both sides computed from their definitions.
pub fn verify_theorem1(dgp: &GridDgp, g: &[u8]) -> Result<f64> {
    if g.iter().any(|&v| v > 1) {
        return Err(Error::InvalidParameter(
            "deterministic classifier must output 0 or 1".into(),
        ));
    }
    let gf: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    check_classifier(dgp, &gf)?;
    let mut worst: f64 = 0.0;
    for (c, &gc) in gf.iter().enumerate() {
        let delta = (cell_error(dgp.eta[1][c], gc) - cell_error(dgp.eta[0][c], gc)).abs();
        worst = worst.max((delta - dgp.risk(c)).abs());
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Check {
    /// Aggregate misclassification gap.
    pub lhs: f64,
    /// `E_s[r]/2 + E_ns[r]/2`.
    pub risk_term: f64,
    /// `sum |P_s - P_ns|` over cells.
    pub l1_distance: f64,
    /// Half the L1 distance.
    pub total_variation: f64,
    /// `risk_term + l1_distance`.
    pub rhs: f64,
    /// `risk_term + total_variation`, the tighter bound.
    pub rhs_tv: f64,
}

/// Both sides of the aggregate bound for a (possibly stochastic) unaware
/// classifier given as per-cell probabilities of predicting 1.
pub fn verify_theorem2(dgp: &GridDgp, g: &[f64]) -> Result<Theorem2Check> {
    check_classifier(dgp, g)?;
    let mut err = [0.0; 2];
    let mut risk = [0.0; 2];
    let mut l1 = 0.0;
    for c in 0..dgp.cells() {
        for s in 0..2 {
            err[s] += dgp.mass[s][c] * cell_error(dgp.eta[s][c], g[c]);
            risk[s] += dgp.mass[s][c] * dgp.risk(c);
        }
        l1 += (dgp.mass[1][c] - dgp.mass[0][c]).abs();
    }
    let risk_term = 0.5 * risk[0] + 0.5 * risk[1];
    Ok(Theorem2Check {
        lhs: (err[1] - err[0]).abs(),
        risk_term,
        l1_distance: l1,
        total_variation: l1 / 2.0,
        rhs: risk_term + l1,
        rhs_tv: risk_term + l1 / 2.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Check {
    /// Misclassification gap restricted to the region.
    pub gap: f64,
    /// `inf_G g - 1/2`.
    pub kappa: f64,
    /// `E[r | G]`.
    pub conditional_risk: f64,
    /// `kappa * E[r | G]`.
    pub bound: f64,
    /// `P(G)`.
    pub mass: f64,
}

impl Theorem3Check {
    pub fn holds(&self) -> bool {
        self.gap > self.bound
    }
}

/// Sub-population gap on region `G` versus `kappa E[r | G]`. The hypotheses
/// (equal feature laws, `eta_s > eta_ns` on `G`, `g > 1/2` on `G`, and
/// `P(G) >= gamma`) are checked first.
pub fn verify_theorem3(
    dgp: &GridDgp,
    g: &[f64],
    region: &[bool],
    gamma: f64,
) -> Result<Theorem3Check> {
    check_classifier(dgp, g)?;
    if region.len() != dgp.cells() {
        return Err(Error::InvalidParameter(
            "region mask must cover the grid".into(),
        ));
    }
    if let Some(c) = (0..dgp.cells()).find(|&c| (dgp.mass[0][c] - dgp.mass[1][c]).abs() > 1e-12) {
        return Err(Error::Hypothesis(format!(
            "group feature distributions differ at cell {c}"
        )));
    }
    let cells: Vec<usize> = (0..dgp.cells()).filter(|&c| region[c]).collect();
    if cells.is_empty() {
        return Err(Error::Hypothesis("region is empty".into()));
    }
    if let Some(&c) = cells.iter().find(|&&c| dgp.eta[1][c] <= dgp.eta[0][c]) {
        return Err(Error::Hypothesis(format!(
            "eta_s must exceed eta_ns on the region; cell {c} has {} vs {}",
            dgp.eta[1][c], dgp.eta[0][c]
        )));
    }
    let inf_g = cells.iter().map(|&c| g[c]).fold(f64::INFINITY, f64::min);
    if inf_g <= 0.5 {
        return Err(Error::Hypothesis(format!(
            "classifier must predict 1 with probability above 1/2 on the region; infimum is {inf_g}"
        )));
    }
    let mass: f64 = cells.iter().map(|&c| dgp.mass[0][c]).sum();
    if mass < gamma {
        return Err(Error::Hypothesis(format!(
            "region mass {mass} is below gamma {gamma}"
        )));
    }
    let mut diff = 0.0;
    let mut risk = 0.0;
    for &c in &cells {
        let p = dgp.mass[0][c];
        diff += p * (cell_error(dgp.eta[1][c], g[c]) - cell_error(dgp.eta[0][c], g[c]));
        risk += p * dgp.risk(c);
    }
    let kappa = inf_g - 0.5;
    let conditional_risk = risk / mass;
    Ok(Theorem3Check {
        gap: diff.abs() / mass,
        kappa,
        conditional_risk,
        bound: kappa * conditional_risk,
        mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn demographic_parity_example() {
        let preds = [1, 1, 0, 0, 1, 0, 0, 0];
        let sens = [1, 1, 1, 1, 0, 0, 0, 0];
        assert_eq!(demographic_parity_gap(&preds, &sens).unwrap(), 0.25);
        assert_eq!(
            demographic_parity_gap(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(),
            1.0
        );
        assert_eq!(
            demographic_parity_gap(&[1, 0, 1, 0], &[1, 1, 0, 0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn empty_group_is_named() {
        match demographic_parity_gap(&[1, 0], &[1, 1]) {
            Err(Error::UndefinedMetric(m)) => assert!(m.contains("unprotected"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn opportunity_and_odds_example() {
        // Group A (protected): TPR 1/2, FPR 1/2. Group B: TPR 1/2, FPR 0.
        let preds = [1, 1, 0, 0, 1, 0, 0, 0];
        let labels = [1, 0, 1, 0, 1, 1, 0, 0];
        let sens = [1, 1, 1, 1, 0, 0, 0, 0];
        assert_eq!(equal_opportunity_gap(&preds, &labels, &sens).unwrap(), 0.0);
        assert_eq!(equalized_odds_gap(&preds, &labels, &sens).unwrap(), 0.25);
        assert_eq!(
            equalized_odds_gap_with(&preds, &labels, &sens, OddsAggregation::Max).unwrap(),
            0.5
        );
    }

    #[test]
    fn perfect_classifier_has_no_gaps() {
        let labels = [1, 0, 1, 0, 1, 0];
        let sens = [1, 1, 1, 0, 0, 0];
        assert_eq!(equal_opportunity_gap(&labels, &labels, &sens).unwrap(), 0.0);
        assert_eq!(equalized_odds_gap(&labels, &labels, &sens).unwrap(), 0.0);
        assert_eq!(misclassification_gap(&labels, &labels, &sens).unwrap(), 0.0);
    }

    #[test]
    fn missing_positive_cell_is_undefined() {
        let r = equal_opportunity_gap(&[1, 0, 1, 0], &[0, 0, 1, 0], &[1, 1, 0, 0]);
        assert!(matches!(r, Err(Error::UndefinedMetric(m)) if m.contains("protected")));
    }

    #[test]
    fn misclassification_examples() {
        // Protected error 3/10, unprotected 1/10.
        let mut preds = vec![0u8; 20];
        let labels = vec![0u8; 20];
        let sens: Vec<u8> = (0..20).map(|i| u8::from(i < 10)).collect();
        preds[0] = 1;
        preds[1] = 1;
        preds[2] = 1;
        preds[10] = 1;
        assert!((misclassification_gap(&preds, &labels, &sens).unwrap() - 0.2).abs() < 1e-15);
        let wrong = [1, 1, 0, 0];
        assert_eq!(
            misclassification_gap(&wrong, &[0, 0, 0, 0], &[1, 1, 0, 0]).unwrap(),
            1.0
        );
    }

    #[test]
    fn subpop_with_full_mass_matches_aggregate() {
        let preds = [1, 0, 1, 1, 0, 0];
        let labels = [1, 1, 0, 1, 0, 1];
        let sens = [1, 0, 1, 0, 1, 0];
        let risks = [0.1, 0.5, 0.3, 0.9, 0.2, 0.4];
        let full = subpop_misclassification_gap(
            &preds,
            &labels,
            &sens,
            &risks,
            SubpopSpec::new(1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(full, misclassification_gap(&preds, &labels, &sens).unwrap());
    }

    #[test]
    fn uniform_risks_take_leading_positions() {
        let spec = SubpopSpec::new(0.5).unwrap();
        assert_eq!(spec.select(&[0.3; 6]), vec![0, 1, 2]);
        assert_eq!(spec.select(&[0.1, 0.9, 0.9, 0.2, 0.9]), vec![1, 2, 4]);
        assert_eq!(SubpopSpec::new(0.34).unwrap().size(6), 3);
    }

    #[test]
    fn risk_concentrated_errors_raise_subpop_gap() {
        // Errors in the protected group are placed on the highest-risk rows;
        // the top-gamma gap must dominate every contiguous lower-risk window
        // of the same size and the aggregate.
        let mut rng = stream_rng(17, 0);
        let n = 200;
        let risks: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let sens: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        let preds: Vec<u8> = (0..n)
            .map(|i| {
                let flip = sens[i] == 1 && risks[i] > 0.7;
                if flip {
                    1 - labels[i]
                } else {
                    labels[i]
                }
            })
            .collect();
        let aggregate = misclassification_gap(&preds, &labels, &sens).unwrap();
        let spec = SubpopSpec::new(0.25).unwrap();
        let top = subpop_misclassification_gap(&preds, &labels, &sens, &risks, spec).unwrap();
        assert!(top >= aggregate, "{top} < {aggregate}");

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| risks[b].total_cmp(&risks[a]));
        let m = spec.size(n);
        let mut best = 0.0f64;
        for start in 0..=(n - m) {
            let w = &order[start..start + m];
            let pick = |v: &[u8]| w.iter().map(|&i| v[i]).collect::<Vec<_>>();
            if let Ok(g) = misclassification_gap(&pick(&preds), &pick(&labels), &pick(&sens)) {
                best = best.max(g);
            }
        }
        assert_eq!(top, best);
    }

    #[test]
    fn metrics_with_empty_group_are_absent() {
        let m = FairnessMetrics::compute(
            &[1, 0],
            &[1, 0],
            &[1, 1],
            Metric::Accuracy,
            OddsAggregation::Mean,
        )
        .unwrap();
        assert_eq!(m.performance, Some(1.0));
        assert!(m.demographic_parity.is_none() && m.misclassification.is_none());
        assert!(!m.notes.is_empty());
        let empty =
            FairnessMetrics::compute(&[], &[], &[], Metric::F1, OddsAggregation::Mean).unwrap();
        assert_eq!(empty.n, 0);
        assert!(empty.performance.is_none());
    }

    #[test]
    fn report_csv_and_json() {
        let mut report = FairnessReport::new("d", Metric::F1, OddsAggregation::Mean);
        let m = FairnessMetrics::compute(
            &[1, 0, 1, 0],
            &[1, 0, 0, 1],
            &[1, 1, 0, 0],
            Metric::F1,
            OddsAggregation::Mean,
        )
        .unwrap();
        report.push("RF", "unmitigated", "all", m.clone());
        report.push("RF", "unmitigated", "high", m);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("classifier,strategy,subset,n,"));
        assert_eq!(text.lines().count(), 3);
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert!(json["results"]["RF"]["unmitigated"]["high"]["demographic_parity"].is_number());
    }

    fn random_grid(seed: u64, shared: bool) -> (GridDgp, Vec<f64>) {
        let mut rng = stream_rng(seed, 0);
        let dgp = GridDgp::random(&mut rng, 100, shared);
        let g = (0..100).map(|_| rng.random::<f64>()).collect();
        (dgp, g)
    }

    #[test]
    fn theorem1_identity_is_exact() {
        let (dgp, _) = random_grid(1, false);
        let g: Vec<u8> = (0..100).map(|c| (c % 3 == 0) as u8).collect();
        assert!(verify_theorem1(&dgp, &g).unwrap() < 1e-12);
        let mut same = dgp.clone();
        same.eta[1] = same.eta[0].clone();
        assert_eq!(verify_theorem1(&same, &g).unwrap(), 0.0);
        assert!((0..100).all(|c| same.risk(c) == 0.0));
    }

    #[test]
    fn theorem2_degenerate_cases() {
        let (mut dgp, g) = random_grid(2, true);
        dgp.eta[1] = dgp.eta[0].clone();
        let chk = verify_theorem2(&dgp, &g).unwrap();
        assert!(chk.lhs.abs() < 1e-15 && chk.risk_term == 0.0 && chk.l1_distance == 0.0);

        // Disjoint supports: L1 distance 2, total variation 1.
        let mut m0 = vec![0.0; 4];
        let mut m1 = vec![0.0; 4];
        m0[0] = 0.5;
        m0[1] = 0.5;
        m1[2] = 0.5;
        m1[3] = 0.5;
        let dgp = GridDgp::new([m0, m1], [vec![0.2; 4], vec![0.7; 4]]).unwrap();
        let chk = verify_theorem2(&dgp, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(chk.total_variation, 1.0);
        assert!(chk.lhs <= chk.rhs_tv);
    }

    #[test]
    fn theorem2_on_standard_grid() {
        let dgp = GridDgp::standard(20);
        for threshold in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let g: Vec<f64> = (0..400)
                .map(|c| f64::from(1.0 - dgp.risk(c) >= threshold))
                .collect();
            let chk = verify_theorem2(&dgp, &g).unwrap();
            assert!(chk.lhs <= chk.rhs_tv + 1e-12, "{chk:?}");
        }
    }

    #[test]
    fn theorem3_closed_form() {
        let n = 10;
        let m = vec![0.1; n];
        let eta0 = vec![0.3; n];
        let eta1 = vec![0.7; n];
        let dgp = GridDgp::new([m.clone(), m], [eta0, eta1]).unwrap();
        let region: Vec<bool> = (0..n).map(|c| c < 5).collect();
        let chk = verify_theorem3(&dgp, &[1.0; 10], &region, 0.2).unwrap();
        assert!((chk.gap - 0.4).abs() < 1e-12);
        assert!((chk.conditional_risk - 0.4).abs() < 1e-12);
        assert_eq!(chk.kappa, 0.5);
        assert!(chk.holds());
    }

    #[test]
    fn theorem3_hypotheses_checked() {
        let m = vec![0.25; 4];
        let equal = GridDgp::new([m.clone(), m.clone()], [vec![0.5; 4], vec![0.5; 4]]).unwrap();
        let all = [true; 4];
        assert!(matches!(
            verify_theorem3(&equal, &[1.0; 4], &all, 0.1),
            Err(Error::Hypothesis(_))
        ));
        let ok = GridDgp::new([m.clone(), m.clone()], [vec![0.2; 4], vec![0.6; 4]]).unwrap();
        assert!(matches!(
            verify_theorem3(&ok, &[0.5; 4], &all, 0.1),
            Err(Error::Hypothesis(_))
        ));
        assert!(matches!(
            verify_theorem3(&ok, &[1.0; 4], &[true, false, false, false], 0.5),
            Err(Error::Hypothesis(_))
        ));
        let shifted = GridDgp::new(
            [m, vec![0.1, 0.4, 0.25, 0.25]],
            [vec![0.2; 4], vec![0.6; 4]],
        )
        .unwrap();
        assert!(matches!(
            verify_theorem3(&shifted, &[1.0; 4], &all, 0.1),
            Err(Error::Hypothesis(_))
        ));
    }

    fn arb_binary(n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>, Vec<u8>)> {
        (
            proptest::collection::vec(0u8..2, n),
            proptest::collection::vec(0u8..2, n),
            proptest::collection::vec(0u8..2, n),
        )
    }

    proptest! {
        #[test]
        fn gaps_symmetric_under_relabel((p, y, s) in arb_binary(40)) {
            let flipped: Vec<u8> = s.iter().map(|v| 1 - v).collect();
            let pairs = [
                (demographic_parity_gap(&p, &s), demographic_parity_gap(&p, &flipped)),
                (equal_opportunity_gap(&p, &y, &s), equal_opportunity_gap(&p, &y, &flipped)),
                (equalized_odds_gap(&p, &y, &s), equalized_odds_gap(&p, &y, &flipped)),
                (misclassification_gap(&p, &y, &s), misclassification_gap(&p, &y, &flipped)),
            ];
            for (a, b) in pairs {
                match (a, b) {
                    (Ok(a), Ok(b)) => {
                        prop_assert_eq!(a, b);
                        prop_assert!((0.0..=1.0).contains(&a));
                    }
                    (Err(_), Err(_)) => {}
                    other => prop_assert!(false, "{:?}", other),
                }
            }
        }

        #[test]
        fn odds_gap_zero_iff_rates_match((p, y, s) in arb_binary(30)) {
            if let (Ok(odds), Ok(cm)) = (equalized_odds_gap(&p, &y, &s), confusion(&p, &y, &s)) {
                let equal = cm[0].tpr() == cm[1].tpr() && cm[0].fpr() == cm[1].fpr();
                prop_assert!(odds >= 0.0);
                prop_assert_eq!(odds == 0.0, equal);
            }
        }

        #[test]
        fn theorem1_random_grids(seed in any::<u64>()) {
            let (dgp, g) = random_grid(seed, false);
            let det: Vec<u8> = g.iter().map(|&v| u8::from(v >= 0.5)).collect();
            prop_assert!(verify_theorem1(&dgp, &det).unwrap() < 1e-12);
        }

        #[test]
        fn theorem2_random_grids(seed in any::<u64>(), shared in any::<bool>()) {
            let (dgp, g) = random_grid(seed, shared);
            let chk = verify_theorem2(&dgp, &g).unwrap();
            prop_assert!(chk.lhs <= chk.rhs_tv + 1e-12);
            prop_assert!(chk.rhs_tv <= chk.rhs);
        }
    }
}
