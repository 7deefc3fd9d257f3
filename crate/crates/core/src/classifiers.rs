//! Unaware downstream classifiers: logistic regression, linear SVM,
//! k-nearest neighbours and a bagged random forest. None of them ever sees
//! the sensitive attribute.

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{self, Samples, TreeModel, TreeParams};
use crate::dataset::{Dataset, FeatureKind, Value};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Logistic,
    RandomForest,
    Knn,
    LinearSvm,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] = [
        ClassifierKind::Logistic,
        ClassifierKind::RandomForest,
        ClassifierKind::Knn,
        ClassifierKind::LinearSvm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::RandomForest => "random_forest",
            ClassifierKind::Knn => "knn",
            ClassifierKind::LinearSvm => "linear_svm",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ClassifierKind::Logistic => "LR",
            ClassifierKind::RandomForest => "RF",
            ClassifierKind::Knn => "KNN",
            ClassifierKind::LinearSvm => "SVM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let k = match s.to_ascii_lowercase().as_str() {
            "logistic" | "lr" => ClassifierKind::Logistic,
            "random_forest" | "rf" => ClassifierKind::RandomForest,
            "knn" => ClassifierKind::Knn,
            "linear_svm" | "svm" => ClassifierKind::LinearSvm,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown classifier '{other}'"
                )))
            }
        };
        Ok(k)
    }
}

/// Per-class sample weighting for the linear models and the forest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    Uniform,
    /// `n / (2 n_c)` for class `c`.
    #[default]
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierParams {
    pub threshold: f64,
    pub class_weight: ClassWeight,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop when the per-epoch objective change falls below this.
    pub tolerance: f64,
    pub svm_lambda: f64,
    pub knn_k: usize,
    pub rf_trees: usize,
    pub rf_max_depth: usize,
    pub rf_min_leaf: usize,
    /// Candidate columns per split; `None` uses `round(sqrt(width))`.
    pub rf_split_features: Option<usize>,
    pub seed: u64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            threshold: 0.5,
            class_weight: ClassWeight::Balanced,
            learning_rate: 0.1,
            epochs: 500,
            tolerance: 1e-7,
            svm_lambda: 1e-3,
            knn_k: 15,
            rf_trees: 100,
            rf_max_depth: 10,
            rf_min_leaf: 1,
            rf_split_features: None,
            seed: 0,
        }
    }
}

/// Train-split mean and standard deviation of numeric columns; indicator
/// columns pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[Vec<f64>], numeric: &[bool]) -> Self {
        let n = rows.len() as f64;
        let w = numeric.len();
        let mut mean = vec![0.0; w];
        let mut scale = vec![1.0; w];
        for c in (0..w).filter(|&c| numeric[c]) {
            let m = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / n;
            mean[c] = m;
            scale[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Standardizer { mean, scale }
    }

    fn apply(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Clone, Debug)]
pub enum Fitted {
    Linear {
        weights: Vec<f64>,
        bias: f64,
        standardizer: Standardizer,
        /// Objective after each accepted epoch.
        loss_history: Vec<f64>,
    },
    Forest {
        trees: Vec<TreeModel>,
    },
    Knn(KnnIndex),
}

/// Training points in flat row-major buffers: standardized numerics and
/// category codes.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    pub k: usize,
    pub train_rows: Vec<usize>,
    pub numeric_width: usize,
    pub category_width: usize,
    pub numeric: Vec<f64>,
    pub categories: Vec<u32>,
    pub labels: Vec<u8>,
    pub standardizer: Standardizer,
}

impl KnnIndex {
    fn query(&self, data: &Dataset, row: usize, buf: &mut Vec<(f64, usize, u8)>) -> f64 {
        let (mut q, qc) = split_row(data, row);
        self.standardizer.apply(&mut q);
        buf.clear();
        let (nw, cw) = (self.numeric_width, self.category_width);
        for j in 0..self.labels.len() {
            let tn = &self.numeric[j * nw..(j + 1) * nw];
            let tc = &self.categories[j * cw..(j + 1) * cw];
            let d: f64 = tn.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            // One-hot Euclidean: every categorical mismatch adds 2.
            let mism = tc.iter().zip(&qc).filter(|(a, b)| a != b).count();
            buf.push((d + 2.0 * mism as f64, self.train_rows[j], self.labels[j]));
        }
        let order =
            |a: &(f64, usize, u8), b: &(f64, usize, u8)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < buf.len() {
            buf.select_nth_unstable_by(self.k - 1, order);
        }
        let pos = buf[..self.k].iter().filter(|d| d.2 == 1).count();
        pos as f64 / self.k as f64
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub kind: ClassifierKind,
    pub threshold: f64,
    pub converged: bool,
    pub params: ClassifierParams,
    pub fitted: Fitted,
}

fn numeric_mask(data: &Dataset) -> Vec<bool> {
    let mut mask = Vec::with_capacity(data.encoded_width());
    for f in &data.features {
        match &f.kind {
            FeatureKind::Numeric => mask.push(true),
            FeatureKind::Categorical { categories } => {
                mask.extend(std::iter::repeat_n(false, categories.len()))
            }
        }
    }
    mask
}

fn class_weights(labels: &[u8], rows: &[usize], scheme: ClassWeight) -> [f64; 2] {
    match scheme {
        ClassWeight::Uniform => [1.0, 1.0],
        ClassWeight::Balanced => {
            let pos = rows.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let n = rows.len() as f64;
            let neg = n - pos;
            if pos == 0.0 || neg == 0.0 {
                [1.0, 1.0]
            } else {
                [n / (2.0 * neg), n / (2.0 * pos)]
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

pub fn fit_classifier(
    data: &Dataset,
    train: &[usize],
    kind: ClassifierKind,
    params: &ClassifierParams,
) -> Result<ClassifierModel> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    if !(0.0..=1.0).contains(&params.threshold) {
        return Err(Error::InvalidParameter(format!(
            "threshold must lie in [0, 1], got {}",
            params.threshold
        )));
    }
    let (fitted, converged) = match kind {
        ClassifierKind::Logistic | ClassifierKind::LinearSvm => {
            fit_linear(data, train, kind, params)
        }
        ClassifierKind::RandomForest => (fit_forest(data, train, params)?, true),
        ClassifierKind::Knn => (fit_knn(data, train, params)?, true),
    };
    if !converged {
        warn!(
            "{} did not converge within {} epochs",
            kind.tag(),
            params.epochs
        );
    }
    Ok(ClassifierModel {
        kind,
        threshold: params.threshold,
        converged,
        params: params.clone(),
        fitted,
    })
}

fn fit_linear(
    data: &Dataset,
    train: &[usize],
    kind: ClassifierKind,
    params: &ClassifierParams,
) -> (Fitted, bool) {
    let numeric = numeric_mask(data);
    let mut rows: Vec<Vec<f64>> = train
        .iter()
        .map(|&i| data.encode(&data.rows[i], None))
        .collect();
    let standardizer = Standardizer::fit(&rows, &numeric);
    for r in rows.iter_mut() {
        standardizer.apply(r);
    }
    let cw = class_weights(&data.labels, train, params.class_weight);
    let ys: Vec<u8> = train.iter().map(|&i| data.labels[i]).collect();
    let sample_w: Vec<f64> = ys.iter().map(|&y| cw[y as usize]).collect();
    let total_w: f64 = sample_w.iter().sum();
    let width = numeric.len();

    let logistic = kind == ClassifierKind::Logistic;
    let lambda = params.svm_lambda;
    let objective = |w: &[f64], b: f64| -> f64 {
        let mut loss = 0.0;
        for ((x, &y), &sw) in rows.iter().zip(&ys).zip(&sample_w) {
            let z = dot(w, x) + b;
            loss += sw
                * if logistic {
                    // log(1 + exp(-y' z)) with y' in {-1, 1}
                    let m = if y == 1 { z } else { -z };
                    if m > 0.0 {
                        (-m).exp().ln_1p()
                    } else {
                        -m + m.exp().ln_1p()
                    }
                } else {
                    let m = if y == 1 { z } else { -z };
                    (1.0 - m).max(0.0)
                };
        }
        let data_term = loss / total_w;
        if logistic {
            data_term
        } else {
            data_term + 0.5 * lambda * dot(w, w)
        }
    };
    let gradient = |w: &[f64], b: f64| -> (Vec<f64>, f64) {
        let mut g = vec![0.0; width];
        let mut gb = 0.0;
        for ((x, &y), &sw) in rows.iter().zip(&ys).zip(&sample_w) {
            let z = dot(w, x) + b;
            let coef = if logistic {
                sigmoid(z) - y as f64
            } else {
                let t = if y == 1 { 1.0 } else { -1.0 };
                if t * z < 1.0 {
                    -t
                } else {
                    0.0
                }
            };
            if coef != 0.0 {
                let c = sw * coef / total_w;
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += c * xi;
                }
                gb += c;
            }
        }
        if !logistic {
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += lambda * wi;
            }
        }
        (g, gb)
    };

    let mut w = vec![0.0; width];
    let mut b = 0.0;
    let mut loss = objective(&w, b);
    let mut history = vec![loss];
    let mut converged = false;
    if logistic {
        // Gradient descent; a step that would raise the loss is rejected
        // and the rate halved.
        let mut lr = params.learning_rate;
        for _ in 0..params.epochs {
            let (g, gb) = gradient(&w, b);
            let cand: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - lr * gi).collect();
            let cb = b - lr * gb;
            let next = objective(&cand, cb);
            if next <= loss {
                let change = loss - next;
                w = cand;
                b = cb;
                loss = next;
                history.push(loss);
                if change < params.tolerance {
                    converged = true;
                    break;
                }
            } else {
                lr /= 2.0;
                if lr < 1e-12 {
                    converged = true;
                    break;
                }
            }
        }
    } else {
        // Sub-gradient descent with a decaying step; the best iterate is kept.
        let (mut best_w, mut best_b, mut best) = (w.clone(), b, loss);
        let mut stall = 0;
        for epoch in 0..params.epochs {
            let lr = params.learning_rate / ((epoch + 1) as f64).sqrt();
            let (g, gb) = gradient(&w, b);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= lr * gi;
            }
            b -= lr * gb;
            let cur = objective(&w, b);
            if cur < best {
                stall = if best - cur < params.tolerance {
                    stall + 1
                } else {
                    0
                };
                best = cur;
                best_w.clone_from(&w);
                best_b = b;
                history.push(best);
            } else {
                stall += 1;
            }
            if stall >= 20 {
                converged = true;
                break;
            }
        }
        w = best_w;
        b = best_b;
    }
    (
        Fitted::Linear {
            weights: w,
            bias: b,
            standardizer,
            loss_history: history,
        },
        converged,
    )
}

fn fit_forest(data: &Dataset, train: &[usize], params: &ClassifierParams) -> Result<Fitted> {
    if params.rf_trees == 0 {
        return Err(Error::InvalidParameter(
            "rf_trees must be at least 1".into(),
        ));
    }
    let x = data.design(false);
    let width = x.n_cols();
    let split_features = params
        .rf_split_features
        .unwrap_or_else(|| ((width as f64).sqrt().round() as usize).max(1));
    let tree_params = TreeParams {
        max_depth: params.rf_max_depth,
        min_leaf: params.rf_min_leaf,
        split_features: Some(split_features.min(width)),
        class_weight: class_weights(&data.labels, train, params.class_weight),
    };
    let features: Vec<usize> = (0..width).collect();
    let samples = Samples::new(data, &x);
    x.sorted_columns();
    let trees = (0..params.rf_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(params.seed, t as u64);
            let boot: Vec<usize> = (0..train.len())
                .map(|_| train[rng.random_range(0..train.len())])
                .collect();
            cart::fit_tree(
                samples,
                &boot,
                &features,
                &tree_params,
                derive_seed(params.seed, t as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fitted::Forest { trees })
}

fn split_row(data: &Dataset, row: usize) -> (Vec<f64>, Vec<u32>) {
    let mut num = Vec::new();
    let mut cat = Vec::new();
    for v in &data.rows[row].values {
        match v {
            Value::Numeric(x) => num.push(*x),
            Value::Category(c) => cat.push(*c),
        }
    }
    (num, cat)
}

fn fit_knn(data: &Dataset, train: &[usize], params: &ClassifierParams) -> Result<Fitted> {
    if params.knn_k == 0 {
        return Err(Error::InvalidParameter("knn_k must be at least 1".into()));
    }
    let k = params.knn_k.min(train.len());
    let mut rows = Vec::with_capacity(train.len());
    let mut categories = Vec::new();
    for &i in train {
        let (n, c) = split_row(data, i);
        rows.push(n);
        categories.extend(c);
    }
    let numeric_width = rows.first().map_or(0, Vec::len);
    let standardizer = Standardizer::fit(&rows, &vec![true; numeric_width]);
    let mut numeric = Vec::with_capacity(numeric_width * rows.len());
    for mut r in rows {
        standardizer.apply(&mut r);
        numeric.extend(r);
    }
    Ok(Fitted::Knn(KnnIndex {
        k,
        train_rows: train.to_vec(),
        numeric_width,
        category_width: categories.len() / train.len(),
        numeric,
        categories,
        labels: train.iter().map(|&i| data.labels[i]).collect(),
        standardizer,
    }))
}

impl ClassifierModel {
    /// Score of row `row` of `data` (the dataset the row lives in may differ
    /// from the training dataset if the schema matches).
    pub fn predict_proba(&self, data: &Dataset, row: usize) -> f64 {
        match &self.fitted {
            Fitted::Linear {
                weights,
                bias,
                standardizer,
                ..
            } => {
                let mut x = data.encode(&data.rows[row], None);
                standardizer.apply(&mut x);
                sigmoid(dot(weights, &x) + bias)
            }
            Fitted::Forest { trees } => {
                let x = data.encode(&data.rows[row], None);
                let votes = trees.iter().filter(|t| t.predict(&x) == 1).count();
                votes as f64 / trees.len() as f64
            }
            Fitted::Knn(index) => index.query(data, row, &mut Vec::new()),
        }
    }

    pub fn predict(&self, data: &Dataset, row: usize) -> u8 {
        u8::from(self.predict_proba(data, row) >= self.threshold)
    }

    pub fn scores(&self, data: &Dataset, indices: &[usize]) -> Vec<f64> {
        match &self.fitted {
            Fitted::Knn(index) => indices
                .par_iter()
                .map_init(Vec::new, |buf, &i| index.query(data, i, buf))
                .collect(),
            _ => indices
                .par_iter()
                .map(|&i| self.predict_proba(data, i))
                .collect(),
        }
    }

    pub fn predictions(&self, data: &Dataset, indices: &[usize]) -> Vec<u8> {
        self.scores(data, indices)
            .into_iter()
            .map(|s| u8::from(s >= self.threshold))
            .collect()
    }

    /// Votes of each tree for a forest model.
    pub fn tree_votes(&self, data: &Dataset, row: usize) -> Option<Vec<u8>> {
        match &self.fitted {
            Fitted::Forest { trees } => {
                let x = data.encode(&data.rows[row], None);
                Some(trees.iter().map(|t| t.predict(&x)).collect())
            }
            _ => None,
        }
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind.tag(),
            "threshold": self.threshold,
            "converged": self.converged,
            "params": self.params,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    Accuracy,
}

impl Metric {
    pub fn tag(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Accuracy => "accuracy",
        }
    }
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidParameter(
            "predictions and labels must be non-empty and aligned".into(),
        ));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 of the positive class. With no predicted and no actual positives the
/// score is 0 and a warning is logged.
pub fn f1_score(preds: &[u8], labels: &[u8]) -> Result<f64> {
    accuracy(preds, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        warn!("F1 undefined without predicted or actual positives; reporting 0");
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

pub fn score_metric(metric: Metric, preds: &[u8], labels: &[u8]) -> Result<f64> {
    match metric {
        Metric::F1 => f1_score(preds, labels),
        Metric::Accuracy => accuracy(preds, labels),
    }
}

pub fn performance(
    model: &ClassifierModel,
    data: &Dataset,
    indices: &[usize],
    metric: Metric,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidParameter("empty evaluation set".into()));
    }
    let preds = model.predictions(data, indices);
    let labels: Vec<u8> = indices.iter().map(|&i| data.labels[i]).collect();
    score_metric(metric, &preds, &labels)
}
